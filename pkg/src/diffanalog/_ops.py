"""Instruction codes for compiled expression tapes.

Shared by the tape compiler and both kernel backends. Codes are stable;
the JSON model format refers to nodes by name, never by code.
"""

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

KIND_TO_OP = {
    "const": OP_CONST,
    "state": OP_STATE,
    "param": OP_PARAM,
    "input": OP_INPUT,
    "mismatch": OP_MISMATCH,
    "time": OP_TIME,
    "add": OP_ADD,
    "sub": OP_SUB,
    "mul": OP_MUL,
    "div": OP_DIV,
    "neg": OP_NEG,
    "sin": OP_SIN,
    "exp": OP_EXP,
    "log": OP_LOG,
    "clamp": OP_CLAMP,
    "logistic": OP_LOGISTIC,
    "sum": OP_SUM,
}

OP_TO_KIND = {v: k for k, v in KIND_TO_OP.items()}

# Integration method codes used by the solve kernels.
METHOD_EULER = 0
METHOD_RK4 = 1
METHOD_EULER_MARUYAMA = 2
