"""
Simulated reduced-precision inference.

Number formats:
  - weights: per-row symmetric int8, q[i,j] = round(w[i,j] / s_i * 127) with
    s_i the row's max absolute value,
  - recurrent/depth accumulators (c, m, the layer streams, the attention
    context once quantized): int16 over [-delta, delta], one step being
    delta / 32767; int16 saturation is therefore exactly the clamp the model
    was trained with,
  - gate pre-activations: int16 over [-8, 8] (sigmoid and tanh are flat
    beyond that),
  - activation outputs: int16 over [-1, 1], produced by 65536-entry lookup
    tables indexed by the 16-bit pre-activation.

Matrix products feed 8-bit operands (weights int8; states narrowed by
taking the high byte, an arithmetic shift) into wide integer accumulators.
Rescaling between formats multiplies by a float64 factor and rounds half
away from zero; float64 multiply/round is IEEE-exact, so the whole path is
bit-deterministic. Embedding lookup and the attention network stay in full
precision, as does the softmax itself (its logits are clamped to
[-gamma, gamma] first).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .metrics import corpus_bleu
from .model import (
    KIND_QUANTIZED,
    ModelConfig,
    ModelParams,
    _session_target_logprob,
    dec_cell_prefixes,
    enc_cell_prefixes,
    entry_to_array,
    float_entry,
    param_shapes,
    read_container,
    write_container,
    FloatModel,
)
from .numerics import log_softmax, softmax
from .segmentation import EOS_ID

WEIGHT_LEVELS = 127
STATE_LEVELS = 32767
ACT_RANGE = 8.0  # gate pre-activation full scale


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    return np.trunc(x + np.copysign(0.5, x))


def _requant(acc, factor: float | np.ndarray, lo=-STATE_LEVELS, hi=STATE_LEVELS):
    """Integer accumulator -> integer in another fixed-point format."""
    return np.clip(round_half_away(acc.astype(np.float64) * factor), lo, hi).astype(np.int64)


def _sat_add16(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = a.astype(np.int32) + b.astype(np.int32)
    return np.clip(s, -STATE_LEVELS, STATE_LEVELS).astype(np.int16)


def _narrow8(v16: np.ndarray) -> np.ndarray:
    """High byte of an int16 state vector (arithmetic shift right by 8)."""
    return (v16 >> 8).astype(np.int64)


# one 16-bit step of the narrowed operand, in real units per delta:
# the shifted value counts steps of 256/32767 * delta
_NARROW_STEP = 256.0 / STATE_LEVELS


def _product_scale(row_scales: np.ndarray, delta: float) -> np.ndarray:
    """Real value of one accumulator unit of q @ narrowed-state products."""
    return row_scales * delta * _NARROW_STEP / WEIGHT_LEVELS


# -----------------------------------------------------------------------------
# Quantized containers
# -----------------------------------------------------------------------------


@dataclass
class QuantizedMatrix:
    """Per-row symmetric 8-bit weights: w[i, j] ~ q[i, j] * scales[i] / 127."""

    q: np.ndarray       # int8 (rows, cols)
    scales: np.ndarray  # float64 (rows,)

    def dequantize(self) -> np.ndarray:
        return self.q.astype(np.float64) * (self.scales / WEIGHT_LEVELS)[:, None]

    @property
    def shape(self):
        return self.q.shape


def quantize_weights(w: np.ndarray) -> QuantizedMatrix:
    """Row-wise int8 quantization; an all-zero row keeps scale 0 and zeros."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("quantize_weights expects a 2-D matrix")
    if not np.all(np.isfinite(w)):
        raise ShapeError("weights must be finite")
    scales = np.abs(w).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    q = round_half_away(w / safe[:, None] * WEIGHT_LEVELS).astype(np.int8)
    return QuantizedMatrix(q, scales)


@dataclass
class FixedVec16:
    """int16 values over the symmetric range [-delta, delta]."""

    values: np.ndarray  # int16, any leading batch shape
    delta: float

    @classmethod
    def from_real(cls, x: np.ndarray, delta: float) -> "FixedVec16":
        v = _requant(np.asarray(x, dtype=np.float64) * (STATE_LEVELS / delta), 1.0)
        return cls(v.astype(np.int16), delta)

    def to_real(self) -> np.ndarray:
        return self.values.astype(np.float64) * (self.delta / STATE_LEVELS)


def quantize_fixed(x: np.ndarray, delta: float) -> np.ndarray:
    """Real array -> saturating int16 in delta units (the raw-array fast path)."""
    scaled = round_half_away(np.asarray(x, dtype=np.float64) * (STATE_LEVELS / delta))
    return np.clip(scaled, -STATE_LEVELS, STATE_LEVELS).astype(np.int16)


def dequantize_fixed(v16: np.ndarray, delta: float) -> np.ndarray:
    return v16.astype(np.float64) * (delta / STATE_LEVELS)


@dataclass
class QuantizedProduct:
    """Wide-integer matmul result plus the real value of one accumulator unit."""

    acc: np.ndarray     # int64 (..., rows)
    scale: np.ndarray   # float64 (rows,)

    def to_real(self) -> np.ndarray:
        return self.acc.astype(np.float64) * self.scale


def quantized_matmul(qm: QuantizedMatrix, x: FixedVec16) -> QuantizedProduct:
    """8-bit product: rows of qm against the high bytes of x.

    x may carry a leading batch dimension. Accumulation is exact in 64-bit
    integers (the supported sizes cannot overflow; asserted).
    """
    if x.values.shape[-1] != qm.q.shape[1]:
        raise ShapeError(f"product shape mismatch: {qm.q.shape} vs {x.values.shape}")
    assert qm.q.shape[1] < (1 << 40), "accumulator width exceeded"
    acc = _narrow8(x.values) @ qm.q.T.astype(np.int64)
    return QuantizedProduct(acc, _product_scale(qm.scales, x.delta))


# -----------------------------------------------------------------------------
# Activation tables
# -----------------------------------------------------------------------------

_TABLES: dict[str, np.ndarray] = {}


def activation_table(kind: str) -> np.ndarray:
    """65536-entry int16 table: index = pre-activation + 32768 (16-bit, [-8, 8]
    scale), value = activation in [-1, 1] at 1/32767 steps."""
    table = _TABLES.get(kind)
    if table is None:
        raw = np.arange(-32768, 32768, dtype=np.float64) * (ACT_RANGE / STATE_LEVELS)
        real = 1.0 / (1.0 + np.exp(-raw)) if kind == "sigmoid" else np.tanh(raw)
        table = np.clip(round_half_away(real * STATE_LEVELS), -STATE_LEVELS, STATE_LEVELS)
        table = table.astype(np.int16)
        _TABLES[kind] = table
    return table


def _lookup(table: np.ndarray, pre16: np.ndarray) -> np.ndarray:
    return table[pre16.astype(np.int32) + 32768]


# -----------------------------------------------------------------------------
# Quantized LSTM cell
# -----------------------------------------------------------------------------

_ACT_STEP = ACT_RANGE / STATE_LEVELS


class QuantizedLstmCell:
    """One LSTM cell in fixed point: int8 weight products, table activations,
    and int16 state arithmetic saturating at [-delta, delta]."""

    def __init__(self, qw_ih: QuantizedMatrix, qw_hh: QuantizedMatrix,
                 bias: np.ndarray, delta: float):
        self.qw_ih = qw_ih
        self.qw_hh = qw_hh
        self.delta = float(delta)
        self.hidden = qw_hh.q.shape[1]
        self.bias16 = np.clip(
            round_half_away(np.asarray(bias, dtype=np.float64) / _ACT_STEP),
            -STATE_LEVELS, STATE_LEVELS,
        ).astype(np.int64)
        # accumulator unit -> pre-activation table steps, one factor per gate row
        self.to_act_ih = _product_scale(qw_ih.scales, self.delta) / _ACT_STEP
        self.to_act_hh = _product_scale(qw_hh.scales, self.delta) / _ACT_STEP

    def step(self, c16: np.ndarray, m16: np.ndarray, x16: np.ndarray):
        """States and input are int16 arrays (B, h) / (B, in) in delta units."""
        h = self.hidden
        acc_x = _narrow8(x16) @ self.qw_ih.q.T.astype(np.int64)
        acc_m = _narrow8(m16) @ self.qw_hh.q.T.astype(np.int64)
        pre = (
            _requant(acc_x, self.to_act_ih)
            + _requant(acc_m, self.to_act_hh)
            + self.bias16
        )
        pre16 = np.clip(pre, -STATE_LEVELS, STATE_LEVELS).astype(np.int16)
        sig = activation_table("sigmoid")
        tan = activation_table("tanh")
        gate_i = _lookup(sig, pre16[..., 0 * h : 1 * h]).astype(np.int64)
        gate_g = _lookup(tan, pre16[..., 1 * h : 2 * h]).astype(np.int64)
        gate_f = _lookup(sig, pre16[..., 2 * h : 3 * h]).astype(np.int64)
        gate_o = _lookup(sig, pre16[..., 3 * h : 4 * h]).astype(np.int64)

        keep = _requant(c16.astype(np.int64) * gate_f, 1.0 / STATE_LEVELS)
        write = _requant(gate_g * gate_i, 1.0 / (STATE_LEVELS * self.delta))
        c_new = np.clip(keep + write, -STATE_LEVELS, STATE_LEVELS).astype(np.int16)
        m_new = _requant(c_new.astype(np.int64) * gate_o, 1.0 / STATE_LEVELS).astype(np.int16)
        return c_new, m_new


def quantized_lstm_step(cell: QuantizedLstmCell, state, x: FixedVec16, delta: float):
    """Public single-step surface; state is a (c, m) pair of FixedVec16."""
    if abs(delta - cell.delta) > 1e-12:
        raise ConfigError(
            f"clip bound {delta} does not match the cell's quantization bound {cell.delta}"
        )
    c, m = state
    c_new, m_new = cell.step(c.values, m.values, x.values)
    return FixedVec16(c_new, delta), FixedVec16(m_new, delta)


def quantized_logits(w_s: QuantizedMatrix, y: FixedVec16, gamma: float) -> np.ndarray:
    """8-bit output product, rescaled to reals and clamped to [-gamma, gamma].

    The subsequent softmax runs in full precision on the returned values.
    """
    if gamma <= 0:
        raise UsageError("gamma must be positive")
    product = quantized_matmul(w_s, y)
    return np.clip(product.to_real(), -gamma, gamma)


# -----------------------------------------------------------------------------
# Whole-model quantization and the decoding session
# -----------------------------------------------------------------------------


def _quantized_names(config: ModelConfig):
    names = []
    for prefix in enc_cell_prefixes(config) + dec_cell_prefixes(config):
        names += [f"{prefix}.w_ih", f"{prefix}.w_hh"]
    names.append("out.w")
    return names


class QuantizedModel:
    """int8 LSTM/softmax weights plus the full-precision leftovers
    (embeddings, attention network, gate biases)."""

    def __init__(self, config: ModelConfig, qweights: dict, floats: dict, delta: float):
        config.validate()
        self.config = config
        self.qweights = qweights
        self.floats = floats
        self.delta = float(delta)
        self.gamma = config.logit_clip
        self.cells = {}
        for prefix in enc_cell_prefixes(config) + dec_cell_prefixes(config):
            self.cells[prefix] = QuantizedLstmCell(
                qweights[f"{prefix}.w_ih"],
                qweights[f"{prefix}.w_hh"],
                floats[f"{prefix}.bias"],
                self.delta,
            )
        self.q_out = qweights["out.w"]

    @classmethod
    def from_params(cls, params: ModelParams, config: ModelConfig, delta=None) -> "QuantizedModel":
        if delta is None:
            delta = config.accumulator_clip
        if delta is None:
            warnings.warn(
                "model was trained without clipping constraints; quantizing "
                "with delta = 1.0 may saturate state values"
            )
            delta = 1.0
        qnames = set(_quantized_names(config))
        qweights = {n: quantize_weights(params[n]) for n in qnames}
        floats = {n: params[n].copy() for n, _ in param_shapes(config) if n not in qnames}
        return cls(config, qweights, floats, delta)

    def open_session(self, source_ids) -> "QuantizedSession":
        return QuantizedSession(self, source_ids)


class QuantizedDecoderState:
    __slots__ = ("layers", "y_prev")

    def __init__(self, layers, y_prev):
        self.layers = layers    # list of (c16, m16) int16 (B, h)
        self.y_prev = y_prev    # float (B, h), feeds the attention query

    def gather(self, indices) -> "QuantizedDecoderState":
        idx = np.asarray(indices, dtype=np.intp)
        return QuantizedDecoderState(
            [(c[idx], m[idx]) for c, m in self.layers], self.y_prev[idx]
        )


class QuantizedSession:
    """Stepwise decoding against a quantized model; same surface as the
    float DecodeSession so beam search and scoring run unchanged."""

    def __init__(self, qmodel: QuantizedModel, source_ids):
        self.qmodel = qmodel
        self.config = qmodel.config
        source_ids = np.asarray(source_ids, dtype=np.intp)
        if source_ids.ndim != 1 or source_ids.size == 0:
            raise UsageError("source must be a non-empty id sequence")
        if source_ids.min() < 0 or source_ids.max() >= self.config.vocab_size:
            raise UsageError("source token id out of range")
        self.source_ids = source_ids
        enc_top16 = self._encode(source_ids)
        self.enc_top = dequantize_fixed(enc_top16, qmodel.delta)  # (M, h) float
        floats = qmodel.floats
        self.keys = self.enc_top @ floats["att.w_keys"].T + floats["att.bias"]

    @property
    def source_len(self) -> int:
        return int(self.source_ids.size)

    def _encode(self, source_ids):
        cfg, qm = self.config, self.qmodel
        delta = qm.delta
        M = source_ids.size
        h = cfg.hidden_size
        stream = quantize_fixed(qm.floats["src_emb"][source_ids], delta)  # (M, e)

        def scan(cell, order):
            c = np.zeros((1, h), dtype=np.int16)
            m = np.zeros((1, h), dtype=np.int16)
            out = np.zeros((M, h), dtype=np.int16)
            for t in order:
                c, m = cell.step(c, m, stream[t : t + 1])
                out[t] = m[0]
            return out

        mf = scan(qm.cells["enc.l1.fwd"], range(M))
        mb = scan(qm.cells["enc.l1.bwd"], range(M - 1, -1, -1))
        stream = np.concatenate([mf, mb], axis=1)
        for layer in range(2, cfg.encoder_layers + 1):
            cell = qm.cells[f"enc.l{layer}"]
            c = np.zeros((1, h), dtype=np.int16)
            m = np.zeros((1, h), dtype=np.int16)
            out = np.zeros((M, h), dtype=np.int16)
            for t in range(M):
                c, m = cell.step(c, m, stream[t : t + 1])
                out[t] = _sat_add16(m[0], stream[t]) if cfg.enc_residual(layer) else m[0]
            stream = out
        return stream

    def start_state(self, n: int = 1) -> QuantizedDecoderState:
        h = self.config.hidden_size
        layers = [
            (np.zeros((n, h), dtype=np.int16), np.zeros((n, h), dtype=np.int16))
            for _ in range(self.config.decoder_layers)
        ]
        return QuantizedDecoderState(layers, np.zeros((n, h)))

    def attention(self, y_prev):
        floats = self.qmodel.floats
        q = y_prev @ floats["att.w_query"].T
        scores = np.tanh(q[:, None, :] + self.keys[None, :, :]) @ floats["att.v"]
        p = softmax(scores)
        return p @ self.enc_top, p

    def step(self, state: QuantizedDecoderState, tokens):
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim != 1 or tokens.shape[0] != state.y_prev.shape[0]:
            raise UsageError("token batch must match the state batch")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise UsageError("target token id out of range")
        cfg, qm = self.config, self.qmodel
        delta = qm.delta

        context, attn = self.attention(state.y_prev)
        ctx16 = quantize_fixed(context, delta)
        stream = quantize_fixed(qm.floats["tgt_emb"][tokens], delta)
        new_layers = []
        y_prev = None
        for layer in range(1, cfg.decoder_layers + 1):
            cell = qm.cells[f"dec.l{layer}"]
            c16, m16 = state.layers[layer - 1]
            inp = np.concatenate([stream, ctx16], axis=1)
            c_new, m_new = cell.step(c16, m16, inp)
            new_layers.append((c_new, m_new))
            if layer == 1:
                y_prev = dequantize_fixed(m_new, delta)
            stream = _sat_add16(m_new, stream) if cfg.dec_residual(layer) else m_new
        y16 = np.concatenate([stream, ctx16], axis=1)
        logits = quantized_logits(qm.q_out, FixedVec16(y16, delta), qm.gamma)
        return QuantizedDecoderState(new_layers, y_prev), log_softmax(logits), attn


# -----------------------------------------------------------------------------
# Parity report
# -----------------------------------------------------------------------------


def corpus_log_perplexity(model, pairs) -> float:
    """Mean negative per-token log-probability of the references."""
    total = 0.0
    tokens = 0
    for src, tgt in pairs:
        session = model.open_session(src)
        total -= _session_target_logprob(session, list(tgt))
        tokens += len(tgt)
    return total / tokens


def _strip_eos(tokens):
    return tokens[:-1] if tokens and tokens[-1] == EOS_ID else list(tokens)


def parity_report(params: ModelParams, config: ModelConfig, pairs,
                  qmodel: QuantizedModel | None = None) -> dict:
    """Side-by-side float vs quantized metrics on a parallel corpus.

    Reports log perplexity of the references, greedy-decode corpus BLEU,
    and the fraction of sentences where the two greedy decodes agree
    exactly. Deterministic.
    """
    from .decode import greedy_decode  # local import to avoid a cycle

    if not pairs:
        raise UsageError("parity report needs at least one pair")
    fmodel = FloatModel(params, config)
    if qmodel is None:
        qmodel = QuantizedModel.from_params(params, config)

    refs = [_strip_eos(list(t)) for _, t in pairs]
    float_out = [greedy_decode(src, fmodel) for src, _ in pairs]
    quant_out = [greedy_decode(src, qmodel) for src, _ in pairs]
    agree = sum(a == b for a, b in zip(float_out, quant_out)) / len(pairs)
    return {
        "float": {
            "log_perplexity": corpus_log_perplexity(fmodel, pairs),
            "bleu": corpus_bleu([_strip_eos(o) for o in float_out], refs),
        },
        "quantized": {
            "log_perplexity": corpus_log_perplexity(qmodel, pairs),
            "bleu": corpus_bleu([_strip_eos(o) for o in quant_out], refs),
        },
        "greedy_agreement": agree,
    }


# -----------------------------------------------------------------------------
# Quantized checkpoint
# -----------------------------------------------------------------------------


def save_quantized_checkpoint(qmodel: QuantizedModel, path) -> None:
    config = qmodel.config
    stored = ModelConfig(**{k: getattr(config, k) for k, _ in ModelConfig._FIELDS})
    stored.accumulator_clip = qmodel.delta
    entries = []
    for name, _ in param_shapes(config):
        if name in qmodel.qweights:
            qm = qmodel.qweights[name]
            payload = qm.q.astype("<i1").tobytes() + qm.scales.astype("<f8").tobytes()
            entries.append((name, 1, qm.q.shape, payload))
        else:
            entries.append(float_entry(name, qmodel.floats[name]))
    write_container(path, KIND_QUANTIZED, stored, entries)


def load_quantized_checkpoint(path) -> QuantizedModel:
    from .errors import FormatError

    kind, config, raw = read_container(path)
    if kind != KIND_QUANTIZED:
        raise FormatError(f"{path}: holds float parameters, not a quantized model")
    if config.accumulator_clip is None:
        raise FormatError(f"{path}: quantized checkpoint lacks the clip bound")
    qweights = {}
    floats = {}
    for name, payload_kind, shape, payload in raw:
        if payload_kind == 1:
            rows, cols = shape
            q = np.frombuffer(payload[: rows * cols], dtype="<i1").reshape(rows, cols)
            scales = np.frombuffer(payload[rows * cols :], dtype="<f8")
            if scales.size != rows:
                raise FormatError(f"{path}: bad scale payload for {name}")
            qweights[name] = QuantizedMatrix(q.astype(np.int8), scales.astype(np.float64))
        else:
            floats[name] = entry_to_array(shape, payload)
    return QuantizedModel(config, qweights, floats, config.accumulator_clip)
