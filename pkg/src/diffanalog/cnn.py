"""Cellular nonlinear network edge detector paradigm.

Grid of locally coupled cells with clamped activation. Each cell's rate
combines self-decay, the feedback template A applied to neighbor
activations, the feedforward template B applied to neighbor inputs and a
bias z; every template application site carries its own multiplicative
mismatch symbol.

Image conventions: :class:`ImageGrid` stores display greyscale in [0, 1]
(black = 0, white = 1). Model inputs are the ink mask ``u = 1 - pixel`` by
default (``input_mode="mask01"``) or bipolar ``u = 1 - 2 * pixel``
(``"bipolar"``); the readout maps the activation back to display space as
``(1 - f(x)) / 2`` so detected edges render black. The B template has zero
row sum for the shipped edge detector, which is what makes uniform regions
settle to "no edge" under either convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import expr as E
from .errors import ModelError
from .gradient import BatchItem, mc_grad
from .optim import TrainConfig, train
from .rng import STREAM_BATCH, STREAM_DATASET, STREAM_EVAL, rng_for
from .solver import EULER, SolveConfig, solve
from .store import TrainableStore
from .sysmodel import CompiledModel, SystemBuilder

__all__ = [
    "ImageGrid",
    "CnnTemplates",
    "PAPER_TEMPLATES",
    "build_cnn",
    "image_to_inputs",
    "readout_to_image",
    "mse_loss",
    "reference_edge",
    "synth_silhouettes",
    "read_pgm",
    "write_pgm",
    "default_solve_config",
    "run_cnn_experiment",
]

DEFAULT_T3 = 10.0
DEFAULT_DT = 0.04
# Programmable window around each template coefficient's nominal value.
# Width 4 keeps the raw-space Adam step (lr * width/2) near the paper's
# physical step size and still contains every reported optimized value.
DEFAULT_HALFWIDTH = 2.0


@dataclass
class ImageGrid:
    """Greyscale image, display convention: black = 0, white = 1."""

    width: int
    height: int
    pixels: np.ndarray  # [height, width]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width):
            raise ModelError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if np.any(self.pixels < 0.0) or np.any(self.pixels > 1.0):
            raise ModelError("pixel values must lie in [0, 1]")

    @classmethod
    def from_array(cls, arr) -> "ImageGrid":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    def is_binary(self) -> bool:
        return bool(np.all((self.pixels == 0.0) | (self.pixels == 1.0)))

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class CnnTemplates:
    """Feedback template A, feedforward template B and bias z."""

    a: tuple
    b: tuple
    z: float
    symmetric: bool = True

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.shape != (3, 3) or b.shape != (3, 3):
            raise ModelError("templates must be 3x3")
        if self.symmetric:
            for t, name in ((a, "A"), (b, "B")):
                corners = [t[0, 0], t[0, 2], t[2, 0], t[2, 2]]
                edges = [t[0, 1], t[1, 0], t[1, 2], t[2, 1]]
                if len(set(corners)) != 1 or len(set(edges)) != 1:
                    raise ModelError(
                        f"symmetric template {name} must share corner and "
                        "edge values"
                    )

    def a_array(self) -> np.ndarray:
        return np.asarray(self.a, dtype=np.float64)

    def b_array(self) -> np.ndarray:
        return np.asarray(self.b, dtype=np.float64)


PAPER_TEMPLATES = CnnTemplates(
    a=((0.0, 0.0, 0.0), (0.0, 2.0, 0.0), (0.0, 0.0, 0.0)),
    b=((-1.0, -1.0, -1.0), (-1.0, 8.0, -1.0), (-1.0, -1.0, -1.0)),
    z=-0.5,
)


def default_solve_config(t3: float = DEFAULT_T3, dt: float = DEFAULT_DT,
                         method: str = EULER) -> SolveConfig:
    return SolveConfig(dt=dt, t_end=t3, method=method)


def build_cnn(rows: int, cols: int, templates: CnnTemplates = PAPER_TEMPLATES,
              sigma: float = 0.0, boundary: str = "zero_flux",
              input_mode: str = "mask01", t3: float = DEFAULT_T3,
              dt: float = DEFAULT_DT,
              trainable_halfwidth: float = DEFAULT_HALFWIDTH,
              readout: str = "clamp",
              smooth_beta: float = 2.0) -> CompiledModel:
    """Compile the grid model; one state per cell, initial state zero.

    ``templates.symmetric`` selects the 7-trainable rotation-invariant
    parameterization (corner/edge/center per template plus z); otherwise all
    9 + 9 + 1 entries are independent trainables. Every application site is
    wrapped in its own mismatch symbol with relative deviation ``sigma``.

    ``readout="clamp"`` is the measurement convention (hard activation, the
    reported metric). ``readout="smooth"`` replaces the display map with a
    logistic of slope ``smooth_beta``: at the settled readout time every
    cell sits beyond the clamp's break points where the hard map has zero
    derivative, so optimizers train against the smooth twin and are scored
    on the hard one (the same surrogate-vs-metric split the PUF readout
    uses).
    """
    if rows < 3 or cols < 3:
        raise ModelError("CNN grid must be at least 3x3")
    if boundary != "zero_flux":
        raise ModelError(f"unknown boundary mode {boundary!r}")
    if input_mode not in ("mask01", "bipolar"):
        raise ModelError(f"unknown input mode {input_mode!r}")
    hw = float(trainable_halfwidth)
    a_t = templates.a_array()
    b_t = templates.b_array()

    builder = SystemBuilder(f"cnn{rows}x{cols}", default_dt=dt)
    cell = {}
    for i in range(rows):
        for j in range(cols):
            cell[i, j] = builder.add_state(f"x{i}_{j}")
    for i in range(rows):
        for j in range(cols):
            builder.declare_input(f"u{i}_{j}")

    def window(v):
        return (v - hw, v + hw)

    def decl_grid(tag, t):
        if templates.symmetric:
            corner = builder.analog(f"{tag}_corner", t[0, 0], window(t[0, 0]))
            edge = builder.analog(f"{tag}_edge", t[0, 1], window(t[0, 1]))
            center = builder.analog(f"{tag}_center", t[1, 1], window(t[1, 1]))
            pick = [[corner, edge, corner], [edge, center, edge],
                    [corner, edge, corner]]
        else:
            pick = [[builder.analog(f"{tag}{m}{n}", t[m, n], window(t[m, n]))
                     for n in range(3)] for m in range(3)]
        return pick

    a_ref = decl_grid("A", a_t)
    b_ref = decl_grid("B", b_t)
    z_ref = builder.analog("z", templates.z, window(templates.z))

    # Shared activation node per cell; reused by every neighbor term and by
    # the readout map, so each evaluates once per sweep.
    act = {(i, j): E.clamp(E.state(cell[i, j]), -1.0, 1.0)
           for i in range(rows) for j in range(cols)}

    for i in range(rows):
        for j in range(cols):
            terms = [E.neg(E.state(cell[i, j]))]
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ki, lj = i + di, j + dj
                    if not (0 <= ki < rows and 0 <= lj < cols):
                        continue  # zero-flux: off-grid neighbors contribute 0
                    m, n = 1 - di, 1 - dj
                    terms.append(builder.mismatch(
                        E.mul(a_ref[m][n], act[ki, lj]), sigma,
                        label=f"A{m}{n}@{i},{j}"))
                    terms.append(builder.mismatch(
                        E.mul(b_ref[m][n], E.inp(cell[ki, lj])), sigma,
                        label=f"B{m}{n}@{i},{j}"))
            terms.append(builder.mismatch(z_ref, sigma, label=f"z@{i},{j}"))
            builder.set_derivative(cell[i, j], E.nsum(terms))

    # Display-space readout: edge cells (activation +1) render black (0).
    if readout == "clamp":
        outs = [E.mul(E.const(0.5), E.sub(E.const(1.0), act[i, j]))
                for i in range(rows) for j in range(cols)]
    elif readout == "smooth":
        outs = [E.sub(E.const(1.0),
                      E.logistic(E.state(cell[i, j]), smooth_beta))
                for i in range(rows) for j in range(cols)]
    else:
        raise ModelError(f"unknown readout mode {readout!r}")
    builder.set_readout([t3], outs)
    return builder.compile()


def image_to_inputs(img: ImageGrid, input_mode: str = "mask01") -> np.ndarray:
    """Model input vector for an image (ink mask or bipolar)."""
    if input_mode == "mask01":
        return 1.0 - img.flat()
    if input_mode == "bipolar":
        return 1.0 - 2.0 * img.flat()
    raise ModelError(f"unknown input mode {input_mode!r}")


def readout_to_image(readout_row: np.ndarray, rows: int, cols: int) -> ImageGrid:
    pixels = np.clip(np.asarray(readout_row, dtype=np.float64), 0.0, 1.0)
    return ImageGrid(width=cols, height=rows, pixels=pixels.reshape(rows, cols))


def mse_loss(readout: ImageGrid, reference: ImageGrid) -> float:
    """Mean over pixels of the squared display-space difference."""
    if readout.pixels.shape != reference.pixels.shape:
        raise ModelError(
            f"image shapes differ: {readout.pixels.shape} vs "
            f"{reference.pixels.shape}"
        )
    return float(np.mean((readout.pixels - reference.pixels) ** 2))


_ideal_cache = {}


def _ideal_model(rows, cols, input_mode, t3, dt, method):
    key = (rows, cols, input_mode, t3, dt, method)
    if key not in _ideal_cache:
        model = build_cnn(rows, cols, PAPER_TEMPLATES, sigma=0.0,
                          input_mode=input_mode, t3=t3, dt=dt)
        params = TrainableStore.from_decls(model.trainables).physical(hard=True)
        cfg = SolveConfig(dt=dt, t_end=t3, method=method)
        _ideal_cache[key] = (model, params.params, cfg)
    return _ideal_cache[key]


def reference_edge(img: ImageGrid, input_mode: str = "mask01",
                   t3: float = DEFAULT_T3, dt: float = DEFAULT_DT,
                   method: str = EULER) -> ImageGrid:
    """Reference output: the ideal (mismatch-free) detector on this image.

    Requires a binary image. The oracle shares the solver, grid and input
    convention of the model under test, so a mismatch-free model with the
    shipped template reproduces it exactly.
    """
    if not img.is_binary():
        raise ModelError("reference_edge requires a binary image")
    model, params, cfg = _ideal_model(img.height, img.width, input_mode,
                                      t3, dt, method)
    delta = np.ones(model.n_mismatch)
    traj = solve(model, params, delta, image_to_inputs(img, input_mode),
                 np.zeros(model.n_states), cfg)
    return ImageGrid(width=img.width, height=img.height,
                     pixels=traj.readouts[0].reshape(img.height, img.width))


def synth_silhouettes(n: int, width: int, height: int,
                      rng: np.random.Generator, input_mode: str = "mask01",
                      t3: float = DEFAULT_T3, dt: float = DEFAULT_DT,
                      method: str = EULER):
    """Synthetic binary silhouettes paired with their reference edges.

    Each image is a union of 1-3 random rectangles/ellipses/triangles drawn
    as black ink on white; degenerate all-white or all-black draws are
    rejected. Deterministic for a given generator state.
    """
    items = []
    for _ in range(n):
        mask = _random_mask(width, height, rng)
        img = ImageGrid(width=width, height=height, pixels=1.0 - mask)
        items.append((img, reference_edge(img, input_mode, t3, dt, method)))
    return items


def _random_mask(width, height, rng):
    # 2-4 shapes with thin features: narrow ellipses and sliver triangles
    # produce the marginal cells that make mismatch actually hurt.
    yy, xx = np.mgrid[0:height, 0:width]
    while True:
        mask = np.zeros((height, width), dtype=bool)
        for _ in range(int(rng.integers(2, 5))):
            kind = int(rng.integers(0, 3))
            if kind == 0:  # rectangle
                r0 = int(rng.integers(0, height - 2))
                c0 = int(rng.integers(0, width - 2))
                r1 = int(rng.integers(r0 + 1, min(height, r0 + height // 2 + 2)))
                c1 = int(rng.integers(c0 + 1, min(width, c0 + width // 2 + 2)))
                mask[r0:r1, c0:c1] = True
            elif kind == 1:  # ellipse
                cy = rng.uniform(height * 0.15, height * 0.85)
                cx = rng.uniform(width * 0.15, width * 0.85)
                ry = rng.uniform(1.0, height * 0.3)
                rx = rng.uniform(1.0, width * 0.3)
                mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:  # triangle
                pts = np.column_stack([
                    rng.uniform(0, height, size=3),
                    rng.uniform(0, width, size=3),
                ])
                mask |= _fill_triangle(yy, xx, pts)
        frac = mask.mean()
        if 0.05 < frac < 0.95:
            return mask.astype(np.float64)


def _fill_triangle(yy, xx, pts):
    def edge(p, q):
        return (q[1] - p[1]) * (yy - p[0]) - (q[0] - p[0]) * (xx - p[1])

    e0 = edge(pts[0], pts[1])
    e1 = edge(pts[1], pts[2])
    e2 = edge(pts[2], pts[0])
    inside_pos = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    inside_neg = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
    return inside_pos | inside_neg


# -- PGM ingestion/emission ---------------------------------------------------


def read_pgm(path) -> ImageGrid:
    """Read a P2 (ASCII) or P5 (binary) PGM file into display space."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        # Skip whitespace and comment lines.
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise ModelError(f"{path}: not a P2/P5 PGM file")
    magic = tokens[0]
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 65535:
        raise ModelError(f"{path}: bad maxval {maxval}")
    count = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        if maxval < 256:
            raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
        else:
            raw = np.frombuffer(data, dtype=">u2", count=count, offset=pos)
        values = raw.astype(np.float64)
    else:
        rest = data[pos:].split()
        if len(rest) < count:
            raise ModelError(f"{path}: expected {count} pixels, got {len(rest)}")
        values = np.array([int(v) for v in rest[:count]], dtype=np.float64)
    pixels = (values / maxval).reshape(height, width)
    return ImageGrid(width=width, height=height, pixels=pixels)


def write_pgm(img: ImageGrid, path, binary: bool = True):
    values = np.round(img.pixels * 255.0).astype(np.uint8)
    if binary:
        header = f"P5\n{img.width} {img.height}\n255\n".encode()
        with open(path, "wb") as f:
            f.write(header + values.tobytes())
    else:
        with open(path, "w") as f:
            f.write(f"P2\n{img.width} {img.height}\n255\n")
            for row in values:
                f.write(" ".join(str(int(v)) for v in row) + "\n")


# -- experiment driver --------------------------------------------------------


@dataclass
class CnnExperimentConfig:
    rows: int = 16
    cols: int = 16
    sigma: float = 0.1
    symmetric: bool = True
    input_mode: str = "bipolar"
    t3: float = DEFAULT_T3
    dt: float = DEFAULT_DT
    method: str = EULER
    n_train: int = 512
    n_test: int = 64
    batch_size: int = 128
    n_steps: int = 64
    lr: float = 0.1
    n_mismatch: int = 1
    n_eval_delta: int = 2
    seed: int = 0
    workers: int = 1
    grad_method: str = "backprop"
    smooth_beta: float = 2.0
    halfwidth: float = DEFAULT_HALFWIDTH


def _dataset_items(dataset, model, input_mode):
    items = []
    for img, ref in dataset:
        items.append(BatchItem(
            inputs=image_to_inputs(img, input_mode),
            x0=np.zeros(model.n_states),
            targets=ref.flat().reshape(1, -1),
        ))
    return items


def evaluate_cnn(model: CompiledModel, params: np.ndarray, items,
                 cfg: SolveConfig, seed: int, n_delta: int) -> float:
    """Expected test MSE over images x paired mismatch draws."""
    from .relax import sample_mismatch

    losses = []
    for i, item in enumerate(items):
        for d in range(n_delta):
            delta = sample_mismatch(model.sigmas, rng_for(seed, STREAM_EVAL, i, d))
            traj = solve(model, params, delta, item.inputs, item.x0, cfg)
            losses.append(float(np.mean((traj.readouts[0] - item.targets[0]) ** 2)))
    return float(np.mean(losses))


def run_cnn_experiment(c: CnnExperimentConfig, log_hook=None) -> dict:
    """Train the mismatched edge detector and report initial/final test MSE.

    Training differentiates the smooth-readout twin of the model (the hard
    clamp has zero derivative once cells settle); the reported MSE and the
    checkpoint-selection metric always use the hard readout.
    """
    templates = PAPER_TEMPLATES if c.symmetric else CnnTemplates(
        a=PAPER_TEMPLATES.a, b=PAPER_TEMPLATES.b, z=PAPER_TEMPLATES.z,
        symmetric=False)
    model = build_cnn(c.rows, c.cols, templates, sigma=c.sigma,
                      input_mode=c.input_mode, t3=c.t3, dt=c.dt,
                      trainable_halfwidth=c.halfwidth)
    model_train = build_cnn(c.rows, c.cols, templates, sigma=c.sigma,
                            input_mode=c.input_mode, t3=c.t3, dt=c.dt,
                            trainable_halfwidth=c.halfwidth,
                            readout="smooth", smooth_beta=c.smooth_beta)
    cfg = SolveConfig(dt=c.dt, t_end=c.t3, method=c.method)
    train_set = synth_silhouettes(c.n_train, c.cols, c.rows,
                                  rng_for(c.seed, STREAM_DATASET, 0),
                                  c.input_mode, c.t3, c.dt, c.method)
    test_set = synth_silhouettes(c.n_test, c.cols, c.rows,
                                 rng_for(c.seed, STREAM_DATASET, 1),
                                 c.input_mode, c.t3, c.dt, c.method)
    train_items = _dataset_items(train_set, model, c.input_mode)
    test_items = _dataset_items(test_set, model, c.input_mode)
    store = TrainableStore.from_decls(model.trainables)
    loss_expr = E.mean_squared_error(model.n_outputs)

    initial_mse = evaluate_cnn(model, store.physical(hard=True).params,
                               test_items, cfg, c.seed, c.n_eval_delta)
    tc = TrainConfig(n_steps=c.n_steps, batch_size=c.batch_size, lr=c.lr,
                     n_mismatch=c.n_mismatch, method=c.grad_method,
                     seed=c.seed, workers=c.workers)

    select_items = train_items[:min(24, len(train_items))]

    def select_hard(st, step, tau, step_seed):
        # Score checkpoints on the measurement readout against a fixed
        # training subset with fixed mismatch draws: a consistent yardstick
        # across steps, unlike the per-step stochastic batch loss.
        return evaluate_cnn(model, st.physical(hard=True).params,
                            select_items, cfg, c.seed, 1)

    result = train(model_train, store, train_items, tc, cfg,
                   loss_expr=loss_expr, select_fn=select_hard)
    best_params = result.best_store.physical(hard=True).params
    final_mse = evaluate_cnn(model, best_params, test_items, cfg, c.seed,
                             c.n_eval_delta)
    if log_hook:
        log_hook(result)
    return {
        "paradigm": "cnn",
        "initial_test_mse": initial_mse,
        "optimized_test_mse": final_mse,
        "best_step": result.best_step,
        "best_train_loss": result.best_loss,
        "trainables": {d.name: float(v) for d, v in
                       zip(model.trainables, best_params)},
        "history": result.history,
        "result": result,
    }
