"""Reference implementations of the hot numeric kernels.

Every function here is written in the restricted style numba's nopython mode
accepts (flat loops over preallocated arrays, no Python objects), so the same
source serves both backends: ``_kernels_numba`` JIT-compiles a fresh copy of
this module, ``_kernels_numpy`` runs it as-is. Keep allocations OUT of these
functions — callers own every buffer, which is what makes the gradient
memory contracts measurable.

Error signalling: kernels cannot raise, so failures return a nonnegative
``(index << 2) | code`` word (code 1 = division by zero, 2 = non-finite
state) and -1 means success.
"""

import math

import numpy as np

OP_CONST = 0
OP_STATE = 1
OP_PARAM = 2
OP_INPUT = 3
OP_MISMATCH = 4
OP_TIME = 5
OP_ADD = 6
OP_SUB = 7
OP_MUL = 8
OP_DIV = 9
OP_NEG = 10
OP_SIN = 11
OP_EXP = 12
OP_LOG = 13
OP_CLAMP = 14
OP_LOGISTIC = 15
OP_SUM = 16

METHOD_EULER = 0
METHOD_RK4 = 1
METHOD_EULER_MARUYAMA = 2

ERR_DIV = 1
ERR_NONFINITE = 2

# JIT wrap order: callees first.
KERNEL_NAMES = (
    "tape_forward",
    "tape_reverse",
    "solve_forward",
    "solve_rows",
    "backprop_sweep",
    "aug_rhs",
    "adjoint_sweep",
)


def tape_forward(ops, ref, f0, f1, args, off, state, params, inputs, mismatch, t, values):
    n = ops.shape[0]
    for k in range(n):
        op = ops[k]
        if op == OP_CONST:
            values[k] = f0[k]
        elif op == OP_STATE:
            values[k] = state[ref[k]]
        elif op == OP_PARAM:
            values[k] = params[ref[k]]
        elif op == OP_INPUT:
            values[k] = inputs[ref[k]]
        elif op == OP_MISMATCH:
            values[k] = mismatch[ref[k]]
        elif op == OP_TIME:
            values[k] = t
        elif op == OP_ADD:
            o = off[k]
            values[k] = values[args[o]] + values[args[o + 1]]
        elif op == OP_SUB:
            o = off[k]
            values[k] = values[args[o]] - values[args[o + 1]]
        elif op == OP_MUL:
            o = off[k]
            values[k] = values[args[o]] * values[args[o + 1]]
        elif op == OP_DIV:
            o = off[k]
            den = values[args[o + 1]]
            if den == 0.0:
                return (k << 2) | ERR_DIV
            values[k] = values[args[o]] / den
        elif op == OP_NEG:
            values[k] = -values[args[off[k]]]
        elif op == OP_SIN:
            values[k] = math.sin(values[args[off[k]]])
        elif op == OP_EXP:
            values[k] = math.exp(values[args[off[k]]])
        elif op == OP_LOG:
            values[k] = math.log(values[args[off[k]]])
        elif op == OP_CLAMP:
            v = values[args[off[k]]]
            lo = f0[k]
            hi = f1[k]
            if v < lo:
                v = lo
            elif v > hi:
                v = hi
            values[k] = v
        elif op == OP_LOGISTIC:
            values[k] = 1.0 / (1.0 + math.exp(-f0[k] * values[args[off[k]]]))
        else:  # OP_SUM
            o = off[k]
            e = off[k + 1]
            acc = 0.0
            for j in range(o, e):
                acc += values[args[j]]
            values[k] = acc
    return -1


def tape_reverse(ops, ref, f0, f1, args, off, values, adj, d_state, d_params):
    # Accumulates into d_state / d_params; caller seeds adj at output slots.
    n = ops.shape[0]
    for k in range(n - 1, -1, -1):
        a = adj[k]
        if a == 0.0:
            continue
        op = ops[k]
        if op == OP_STATE:
            d_state[ref[k]] += a
        elif op == OP_PARAM:
            d_params[ref[k]] += a
        elif op == OP_ADD:
            o = off[k]
            adj[args[o]] += a
            adj[args[o + 1]] += a
        elif op == OP_SUB:
            o = off[k]
            adj[args[o]] += a
            adj[args[o + 1]] -= a
        elif op == OP_MUL:
            o = off[k]
            adj[args[o]] += a * values[args[o + 1]]
            adj[args[o + 1]] += a * values[args[o]]
        elif op == OP_DIV:
            o = off[k]
            den = values[args[o + 1]]
            adj[args[o]] += a / den
            adj[args[o + 1]] -= a * values[k] / den
        elif op == OP_NEG:
            adj[args[off[k]]] -= a
        elif op == OP_SIN:
            adj[args[off[k]]] += a * math.cos(values[args[off[k]]])
        elif op == OP_EXP:
            adj[args[off[k]]] += a * values[k]
        elif op == OP_LOG:
            adj[args[off[k]]] += a / values[args[off[k]]]
        elif op == OP_CLAMP:
            v = values[args[off[k]]]
            if f0[k] < v < f1[k]:
                adj[args[off[k]]] += a
        elif op == OP_LOGISTIC:
            y = values[k]
            adj[args[off[k]]] += a * f0[k] * y * (1.0 - y)
        elif op == OP_SUM:
            o = off[k]
            e = off[k + 1]
            for j in range(o, e):
                adj[args[j]] += a
        # const/input/mismatch/time: adjoint is dropped


def solve_forward(dops, dref, df0, df1, dargs, doff, douts,
                  nops, nref, nf0, nf1, nargs, noff, nouts,
                  method, dt, n_steps, params, inputs, mismatch,
                  noise, states, dvalues, nvalues, k1, k2, k3, xs):
    """Fixed-step integration recording every grid state in ``states``.

    states[0] holds the initial condition on entry; rows 1..n_steps are
    written. ``noise`` is the [n_steps, n] matrix of Wiener increments
    (only read for Euler-Maruyama).
    """
    n = states.shape[1]
    for i in range(n_steps):
        t = i * dt
        x = states[i]
        if method == METHOD_RK4:
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               x, params, inputs, mismatch, t, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k1[j] = dvalues[douts[j]]
                xs[j] = x[j] + 0.5 * dt * k1[j]
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               xs, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k2[j] = dvalues[douts[j]]
                xs[j] = x[j] + 0.5 * dt * k2[j]
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               xs, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k3[j] = dvalues[douts[j]]
                xs[j] = x[j] + dt * k3[j]
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               xs, params, inputs, mismatch, t + dt, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k4 = dvalues[douts[j]]
                states[i + 1, j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4)
        else:
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               x, params, inputs, mismatch, t, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                states[i + 1, j] = x[j] + dt * dvalues[douts[j]]
            if method == METHOD_EULER_MARUYAMA:
                err = tape_forward(nops, nref, nf0, nf1, nargs, noff,
                                   x, params, inputs, mismatch, t, nvalues)
                if err >= 0:
                    return (i << 2) | (err & 3)
                for j in range(n):
                    states[i + 1, j] += nvalues[nouts[j]] * noise[i, j]
        for j in range(n):
            if not math.isfinite(states[i + 1, j]):
                return ((i + 1) << 2) | ERR_NONFINITE
    return -1


def solve_rows(dops, dref, df0, df1, dargs, doff, douts,
               method, dt, n_steps, params, inputs, mismatch,
               x, row_idx, x_rows, dvalues, k1, k2, k3, xs):
    """Forward integration keeping only the current state.

    Snapshots x into ``x_rows[r]`` whenever the grid index equals
    ``row_idx[r]`` (``row_idx`` ascending). Memory use is independent of
    ``n_steps``, which is the point: this is the adjoint path's forward pass.
    """
    n = x.shape[0]
    nrows = row_idx.shape[0]
    r = 0
    if nrows > 0 and row_idx[0] == 0:
        for j in range(n):
            x_rows[0, j] = x[j]
        r = 1
    for i in range(n_steps):
        t = i * dt
        if method == METHOD_RK4:
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               x, params, inputs, mismatch, t, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k1[j] = dvalues[douts[j]]
                xs[j] = x[j] + 0.5 * dt * k1[j]
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               xs, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k2[j] = dvalues[douts[j]]
                xs[j] = x[j] + 0.5 * dt * k2[j]
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               xs, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k3[j] = dvalues[douts[j]]
                xs[j] = x[j] + dt * k3[j]
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               xs, params, inputs, mismatch, t + dt, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                k4 = dvalues[douts[j]]
                x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4)
        else:
            err = tape_forward(dops, dref, df0, df1, dargs, doff,
                               x, params, inputs, mismatch, t, dvalues)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                x[j] = x[j] + dt * dvalues[douts[j]]
        for j in range(n):
            if not math.isfinite(x[j]):
                return ((i + 1) << 2) | ERR_NONFINITE
        if r < nrows and row_idx[r] == i + 1:
            for j in range(n):
                x_rows[r, j] = x[j]
            r += 1
    return -1


def backprop_sweep(dops, dref, df0, df1, dargs, doff, douts,
                   nops, nref, nf0, nf1, nargs, noff, nouts,
                   method, dt, n_steps, params, inputs, mismatch,
                   noise, states, contrib_idx, contrib_dstate,
                   dvalues, dadj, nvalues, nadj,
                   a, g, dx, acc, seed, k1, k2, k3, xs2, xs3, xs4):
    """Reverse sweep of the discrete solver map.

    ``contrib_dstate[r]`` is dLoss/dx at grid index ``contrib_idx[r]``
    (ascending); on exit ``a`` holds dLoss/dx0 and ``g`` the accumulated
    dLoss/dparams along the trajectory path.
    """
    n = states.shape[1]
    nslots = dops.shape[0]
    nnslots = nops.shape[0]
    for j in range(n):
        a[j] = 0.0
    r = contrib_idx.shape[0] - 1
    if r >= 0 and contrib_idx[r] == n_steps:
        for j in range(n):
            a[j] += contrib_dstate[r, j]
        r -= 1
    for i in range(n_steps - 1, -1, -1):
        t = i * dt
        x = states[i]
        if method == METHOD_RK4:
            # Recompute stage points from the stored grid state.
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         x, params, inputs, mismatch, t, dvalues)
            for j in range(n):
                k1[j] = dvalues[douts[j]]
                xs2[j] = x[j] + 0.5 * dt * k1[j]
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         xs2, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            for j in range(n):
                k2[j] = dvalues[douts[j]]
                xs3[j] = x[j] + 0.5 * dt * k2[j]
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         xs3, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            for j in range(n):
                k3[j] = dvalues[douts[j]]
                xs4[j] = x[j] + dt * k3[j]
            # Stage 4
            for j in range(n):
                acc[j] = a[j]
                seed[j] = dt / 6.0 * a[j]
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         xs4, params, inputs, mismatch, t + dt, dvalues)
            for s in range(nslots):
                dadj[s] = 0.0
            for j in range(n):
                dadj[douts[j]] += seed[j]
                dx[j] = 0.0
            tape_reverse(dops, dref, df0, df1, dargs, doff, dvalues, dadj, dx, g)
            for j in range(n):
                acc[j] += dx[j]
                seed[j] = dt / 3.0 * a[j] + dt * dx[j]
            # Stage 3
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         xs3, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            for s in range(nslots):
                dadj[s] = 0.0
            for j in range(n):
                dadj[douts[j]] += seed[j]
                dx[j] = 0.0
            tape_reverse(dops, dref, df0, df1, dargs, doff, dvalues, dadj, dx, g)
            for j in range(n):
                acc[j] += dx[j]
                seed[j] = dt / 3.0 * a[j] + 0.5 * dt * dx[j]
            # Stage 2
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         xs2, params, inputs, mismatch, t + 0.5 * dt, dvalues)
            for s in range(nslots):
                dadj[s] = 0.0
            for j in range(n):
                dadj[douts[j]] += seed[j]
                dx[j] = 0.0
            tape_reverse(dops, dref, df0, df1, dargs, doff, dvalues, dadj, dx, g)
            for j in range(n):
                acc[j] += dx[j]
                seed[j] = dt / 6.0 * a[j] + 0.5 * dt * dx[j]
            # Stage 1
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         x, params, inputs, mismatch, t, dvalues)
            for s in range(nslots):
                dadj[s] = 0.0
            for j in range(n):
                dadj[douts[j]] += seed[j]
                dx[j] = 0.0
            tape_reverse(dops, dref, df0, df1, dargs, doff, dvalues, dadj, dx, g)
            for j in range(n):
                a[j] = acc[j] + dx[j]
        else:
            tape_forward(dops, dref, df0, df1, dargs, doff,
                         x, params, inputs, mismatch, t, dvalues)
            for s in range(nslots):
                dadj[s] = 0.0
            for j in range(n):
                dadj[douts[j]] += dt * a[j]
                dx[j] = 0.0
            tape_reverse(dops, dref, df0, df1, dargs, doff, dvalues, dadj, dx, g)
            if method == METHOD_EULER_MARUYAMA:
                tape_forward(nops, nref, nf0, nf1, nargs, noff,
                             x, params, inputs, mismatch, t, nvalues)
                for s in range(nnslots):
                    nadj[s] = 0.0
                for j in range(n):
                    nadj[nouts[j]] += noise[i, j] * a[j]
                tape_reverse(nops, nref, nf0, nf1, nargs, noff, nvalues, nadj, dx, g)
            for j in range(n):
                a[j] += dx[j]
        if r >= 0 and contrib_idx[r] == i:
            for j in range(n):
                a[j] += contrib_dstate[r, j]
            r -= 1


def aug_rhs(dops, dref, df0, df1, dargs, doff, douts,
            x, av, t, params, inputs, mismatch,
            dvalues, dadj, fx, fa, fu):
    """Right-hand side of the augmented (state, adjoint, accumulator) system:
    fx = f(x, t), fa = -J_x^T a, fu = -J_theta^T a.
    """
    n = x.shape[0]
    m = fu.shape[0]
    nslots = dops.shape[0]
    err = tape_forward(dops, dref, df0, df1, dargs, doff,
                       x, params, inputs, mismatch, t, dvalues)
    if err >= 0:
        return err
    for j in range(n):
        fx[j] = dvalues[douts[j]]
        fa[j] = 0.0
    for j in range(m):
        fu[j] = 0.0
    for s in range(nslots):
        dadj[s] = 0.0
    for j in range(n):
        dadj[douts[j]] += av[j]
    tape_reverse(dops, dref, df0, df1, dargs, doff, dvalues, dadj, fa, fu)
    for j in range(n):
        fa[j] = -fa[j]
    for j in range(m):
        fu[j] = -fu[j]
    return -1


def adjoint_sweep(dops, dref, df0, df1, dargs, doff, douts,
                  rops, rref, rf0, rf1, rargs, roff, routs,
                  method, dt, params, inputs, mismatch,
                  x_rows, row_idx, seed_rows,
                  xrec, a, u,
                  dvalues, dadj, rvalues, radj,
                  sx, sa, su, tx, ta, tu, fx, fa, fu):
    """Backward integration of the augmented system from the last readout.

    Readout contributions are injected at their stored grid rows (exact
    forward states), and the reconstructed state resyncs to those rows so
    drift never spans more than one readout interval. Every buffer is sized
    by the state/parameter counts only.
    """
    n = xrec.shape[0]
    m = u.shape[0]
    nslots = dops.shape[0]
    rslots = rops.shape[0]
    nrows = row_idx.shape[0]
    n_out = seed_rows.shape[1]
    h = -dt

    for j in range(n):
        a[j] = 0.0
    for j in range(m):
        u[j] = 0.0

    r = nrows - 1
    # Contribution at the starting row (the last readout time).
    for j in range(n):
        xrec[j] = x_rows[r, j]
    err = tape_forward(rops, rref, rf0, rf1, rargs, roff,
                       xrec, params, inputs, mismatch, row_idx[r] * dt, rvalues)
    if err >= 0:
        return (row_idx[r] << 2) | (err & 3)
    for s in range(rslots):
        radj[s] = 0.0
    for k in range(n_out):
        radj[routs[k]] += seed_rows[r, k]
    tape_reverse(rops, rref, rf0, rf1, rargs, roff, rvalues, radj, a, u)
    start = row_idx[r]
    r -= 1

    for i in range(start, 0, -1):
        t = i * dt
        if method == METHOD_RK4:
            err = aug_rhs(dops, dref, df0, df1, dargs, doff, douts,
                          xrec, a, t, params, inputs, mismatch,
                          dvalues, dadj, sx[0], sa[0], su[0])
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                tx[j] = xrec[j] + 0.5 * h * sx[0, j]
                ta[j] = a[j] + 0.5 * h * sa[0, j]
            err = aug_rhs(dops, dref, df0, df1, dargs, doff, douts,
                          tx, ta, t + 0.5 * h, params, inputs, mismatch,
                          dvalues, dadj, sx[1], sa[1], su[1])
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                tx[j] = xrec[j] + 0.5 * h * sx[1, j]
                ta[j] = a[j] + 0.5 * h * sa[1, j]
            err = aug_rhs(dops, dref, df0, df1, dargs, doff, douts,
                          tx, ta, t + 0.5 * h, params, inputs, mismatch,
                          dvalues, dadj, sx[2], sa[2], su[2])
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                tx[j] = xrec[j] + h * sx[2, j]
                ta[j] = a[j] + h * sa[2, j]
            err = aug_rhs(dops, dref, df0, df1, dargs, doff, douts,
                          tx, ta, t + h, params, inputs, mismatch,
                          dvalues, dadj, sx[3], sa[3], su[3])
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                xrec[j] += h / 6.0 * (sx[0, j] + 2.0 * sx[1, j] + 2.0 * sx[2, j] + sx[3, j])
                a[j] += h / 6.0 * (sa[0, j] + 2.0 * sa[1, j] + 2.0 * sa[2, j] + sa[3, j])
            for j in range(m):
                u[j] += h / 6.0 * (su[0, j] + 2.0 * su[1, j] + 2.0 * su[2, j] + su[3, j])
        else:
            err = aug_rhs(dops, dref, df0, df1, dargs, doff, douts,
                          xrec, a, t, params, inputs, mismatch,
                          dvalues, dadj, fx, fa, fu)
            if err >= 0:
                return (i << 2) | (err & 3)
            for j in range(n):
                xrec[j] += h * fx[j]
                a[j] += h * fa[j]
            for j in range(m):
                u[j] += h * fu[j]
        for j in range(n):
            v = xrec[j]
            if not math.isfinite(v) or v > 1e100 or v < -1e100:
                return ((i - 1) << 2) | ERR_NONFINITE
        if r >= 0 and row_idx[r] == i - 1:
            for j in range(n):
                xrec[j] = x_rows[r, j]
            err = tape_forward(rops, rref, rf0, rf1, rargs, roff,
                               xrec, params, inputs, mismatch, (i - 1) * dt, rvalues)
            if err >= 0:
                return ((i - 1) << 2) | (err & 3)
            for s in range(rslots):
                radj[s] = 0.0
            for k in range(n_out):
                radj[routs[k]] += seed_rows[r, k]
            tape_reverse(rops, rref, rf0, rf1, rargs, roff, rvalues, radj, a, u)
            r -= 1
    return -1
