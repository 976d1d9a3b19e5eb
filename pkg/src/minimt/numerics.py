"""
Dense float64 primitives: matrix products, stable softmax, and a hand-written
LSTM cell with its reverse-mode derivative.

Conventions used throughout the package:
  - every tensor is a 2-D float64 ndarray; vectors ride along as 1-row
    matrices or plain 1-D biases,
  - batches are row-major: x (B, in), states (B, h),
  - the four gate blocks of an LSTM weight matrix are stacked in the fixed
    order [input, candidate, forget, output].

Backward passes are written per operation; there is no autodiff tape.
"""

import numpy as np

from .errors import ShapeError, UsageError

INIT_RANGE = 0.04  # uniform initialization half-width for all trainable weights


# -----------------------------------------------------------------------------
# Basic linear algebra
# -----------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a (m, k) @ b (k, n) -> (m, n)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def softmax(v: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax. v (B, n) or (n,) -> same shape, rows sum to 1."""
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] < 1:
        raise ShapeError(f"softmax expects a non-empty row vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ShapeError("softmax input contains non-finite entries")
    e = np.exp(v - v.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def log_softmax(v: np.ndarray) -> np.ndarray:
    """Row-wise log softmax, computed as v - logsumexp(v)."""
    v = np.asarray(v, dtype=np.float64)
    m = v.max(axis=-1, keepdims=True)
    s = np.log(np.exp(v - m).sum(axis=-1, keepdims=True))
    return v - m - s


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def uniform_init(shape, seed=None, *, rng=None) -> np.ndarray:
    """Tensor with i.i.d. entries uniform in [-0.04, 0.04].

    Deterministic for a given seed; pass rng to draw from a shared stream.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)


def clip_global_norm(grads: list, max_norm: float) -> list:
    """Uniformly rescale a gradient list so its global L2 norm is <= max_norm.

    Gradients whose joint norm is already within the bound are returned
    unchanged (same arrays, no copy).
    """
    if max_norm <= 0:
        raise ShapeError("max_norm must be positive")
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g)))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


def global_norm(grads: list) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


# -----------------------------------------------------------------------------
# LSTM cell
# -----------------------------------------------------------------------------


class LstmCellParams:
    """Weights of one LSTM cell.

    w_ih (4h, in) acts on the layer input, w_hh (4h, h) on the previous
    hidden state, bias (4h,). The h-row blocks are the input, candidate,
    forget, and output gates, in that order. A gate with zero bias matches
    the plain bias-free gating equations exactly.
    """

    __slots__ = ("w_ih", "w_hh", "bias")

    def __init__(self, w_ih: np.ndarray, w_hh: np.ndarray, bias: np.ndarray):
        w_ih = np.asarray(w_ih, dtype=np.float64)
        w_hh = np.asarray(w_hh, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if w_ih.ndim != 2 or w_hh.ndim != 2 or bias.ndim != 1:
            raise ShapeError("LSTM params must be 2-D weights and a 1-D bias")
        if w_ih.shape[0] != w_hh.shape[0] or w_ih.shape[0] != bias.shape[0]:
            raise ShapeError(
                f"gate row counts disagree: {w_ih.shape}, {w_hh.shape}, {bias.shape}"
            )
        if w_ih.shape[0] % 4 != 0 or w_hh.shape[1] * 4 != w_hh.shape[0]:
            raise ShapeError(f"gate block must be 4h rows with h columns, got {w_hh.shape}")
        self.w_ih = w_ih
        self.w_hh = w_hh
        self.bias = bias

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


class LstmState:
    """Memory state c and hidden state m, each (B, h)."""

    __slots__ = ("c", "m")

    def __init__(self, c: np.ndarray, m: np.ndarray):
        self.c = np.asarray(c, dtype=np.float64)
        self.m = np.asarray(m, dtype=np.float64)
        if self.c.shape != self.m.shape:
            raise ShapeError(f"state shapes disagree: c {self.c.shape}, m {self.m.shape}")

    @staticmethod
    def zeros(batch: int, hidden: int) -> "LstmState":
        return LstmState(np.zeros((batch, hidden)), np.zeros((batch, hidden)))


def lstm_cell_forward(params: LstmCellParams, prev: LstmState, x: np.ndarray, clip=None):
    """One LSTM step. x (B, in), prev states (B, h) -> (LstmState, cache).

    Gates:
        i = sigmoid(W1 x + W2 m), g = tanh(W3 x + W4 m),
        f = sigmoid(W5 x + W6 m), o = sigmoid(W7 x + W8 m),
        c = c_prev * f + g * i,   m = c * o.
    With clip set, c is clamped to [-clip, clip] before computing m, so m is
    bounded by the same value. The cache feeds lstm_cell_backward.
    """
    x = np.asarray(x, dtype=np.float64)
    h = params.hidden_size
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"cell input shape {x.shape} does not match w_ih {params.w_ih.shape}")
    if prev.c.shape != (x.shape[0], h):
        raise ShapeError(f"state shape {prev.c.shape} does not match (B={x.shape[0]}, h={h})")

    pre = x @ params.w_ih.T + prev.m @ params.w_hh.T + params.bias
    i = sigmoid(pre[:, 0 * h : 1 * h])
    g = np.tanh(pre[:, 1 * h : 2 * h])
    f = sigmoid(pre[:, 2 * h : 3 * h])
    o = sigmoid(pre[:, 3 * h : 4 * h])
    c_raw = prev.c * f + g * i
    c = np.clip(c_raw, -clip, clip) if clip is not None else c_raw
    m = c * o
    cache = {
        "x": x, "c_prev": prev.c, "m_prev": prev.m,
        "i": i, "g": g, "f": f, "o": o, "c_raw": c_raw, "c": c, "clip": clip,
    }
    return LstmState(c, m), cache


def lstm_cell_backward(params: LstmCellParams, cache, d_c=None, d_m=None):
    """Reverse-mode step for lstm_cell_forward.

    d_c / d_m are loss gradients w.r.t. the returned state (either may be
    None). Returns (grads, d_prev, d_x) where grads has w_ih/w_hh/bias
    arrays, d_prev is an LstmState of gradients, and d_x matches x.
    The clamp passes gradient only where c_raw stayed inside [-clip, clip].
    """
    if cache is None:
        raise UsageError("lstm_cell_backward needs the forward cache")
    x, c_prev, m_prev = cache["x"], cache["c_prev"], cache["m_prev"]
    i, g, f, o, c_raw, c = cache["i"], cache["g"], cache["f"], cache["o"], cache["c_raw"], cache["c"]
    B, h = c.shape
    if d_c is None:
        d_c = np.zeros_like(c)
    if d_m is None:
        d_m = np.zeros_like(c)

    d_c_total = d_c + d_m * o
    d_o = d_m * c
    if cache["clip"] is not None:
        clip = cache["clip"]
        d_c_total = d_c_total * ((c_raw >= -clip) & (c_raw <= clip))
    d_f = d_c_total * c_prev
    d_c_prev = d_c_total * f
    d_i = d_c_total * g
    d_g = d_c_total * i

    d_pre = np.concatenate(
        [
            d_i * i * (1.0 - i),
            d_g * (1.0 - g * g),
            d_f * f * (1.0 - f),
            d_o * o * (1.0 - o),
        ],
        axis=1,
    )
    grads = {
        "w_ih": d_pre.T @ x,
        "w_hh": d_pre.T @ m_prev,
        "bias": d_pre.sum(axis=0),
    }
    d_x = d_pre @ params.w_ih
    d_m_prev = d_pre @ params.w_hh
    return grads, LstmState(d_c_prev, d_m_prev), d_x
