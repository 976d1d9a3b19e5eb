"""
Deep residual-LSTM encoder-decoder with attention.

Architecture:
  - encoder layer 1 is bi-directional; the two direction outputs are
    concatenated (width 2h) and consumed by layer 2,
  - layers from residual_start_layer up add their input to their output
    (the encoder starts residual adds at layer 3 at the earliest, since the
    layer-2 input is 2h wide and its output h wide),
  - attention reads the top encoder layer, queried by the bottom decoder
    layer's output from the previous step; the context vector is
    concatenated to the input of every decoder layer and to the softmax
    input alongside the top decoder output,
  - output logits are clamped to [-logit_clip, logit_clip] before the
    softmax.

When accumulator_clip (delta) is active, every LSTM memory state and every
depth-stream value (the layer-1 input included) is clamped to
[-delta, delta]; this is what makes the trained model quantizable.

Both a step-wise decoding session (for beam search, sampling, scoring) and a
full differentiable pass with hand-written backpropagation live here. All
arrays are float64; a batch dimension leads everywhere.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UsageError
from .numerics import (
    LstmCellParams,
    LstmState,
    log_softmax,
    lstm_cell_backward,
    lstm_cell_forward,
    softmax,
    uniform_init,
)
from .segmentation import BOS_ID, EOS_ID


# -----------------------------------------------------------------------------
# Configuration and parameters
# -----------------------------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int = 128
    embedding_size: int = 64
    encoder_layers: int = 4
    decoder_layers: int = 4
    residual_start_layer: int = 3
    attention_hidden: int = 128
    logit_clip: float = 25.0
    accumulator_clip: float | None = None  # None: unconstrained model

    def validate(self):
        if self.encoder_layers < 2:
            raise ConfigError("encoder needs the bi-directional layer plus at least one more")
        if self.decoder_layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if self.residual_start_layer < 2:
            raise ConfigError("residual_start_layer must be >= 2")
        if self.vocab_size < 5:
            raise ConfigError("vocabulary must hold the reserved ids plus content")
        if min(self.hidden_size, self.embedding_size, self.attention_hidden) < 1:
            raise ConfigError("layer sizes must be positive")
        if self.logit_clip <= 0:
            raise ConfigError("logit_clip must be positive")
        if self.accumulator_clip is not None and self.accumulator_clip <= 0:
            raise ConfigError("accumulator_clip must be positive when set")
        return self

    def enc_residual(self, layer: int) -> bool:
        # layer 2 consumes the 2h bi-directional concat, so its input can
        # never be added to its h-wide output
        return layer >= max(self.residual_start_layer, 3)

    def dec_residual(self, layer: int) -> bool:
        return layer >= self.residual_start_layer

    def enc_input_width(self, layer: int) -> int:
        if layer == 1:
            return self.embedding_size
        if layer == 2:
            return 2 * self.hidden_size
        return self.hidden_size

    def dec_input_width(self, layer: int) -> int:
        stream = self.embedding_size if layer == 1 else self.hidden_size
        return stream + self.hidden_size  # attention context rides along

    _FIELDS = (
        ("vocab_size", int), ("hidden_size", int), ("embedding_size", int),
        ("encoder_layers", int), ("decoder_layers", int),
        ("residual_start_layer", int), ("attention_hidden", int),
        ("logit_clip", float), ("accumulator_clip", float),
    )

    def to_text(self) -> str:
        lines = []
        for name, _ in self._FIELDS:
            value = getattr(self, name)
            lines.append(f"{name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
        kwargs = {}
        for name, typ in cls._FIELDS:
            if name not in values:
                raise FormatError(f"model config missing field {name}")
            raw = values[name]
            kwargs[name] = None if raw == "none" else typ(raw)
        return cls(**kwargs).validate()


def enc_cell_prefixes(config: ModelConfig):
    names = ["enc.l1.fwd", "enc.l1.bwd"]
    names += [f"enc.l{i}" for i in range(2, config.encoder_layers + 1)]
    return names


def dec_cell_prefixes(config: ModelConfig):
    return [f"dec.l{i}" for i in range(1, config.decoder_layers + 1)]


def param_shapes(config: ModelConfig):
    """Canonical (name, shape) list; file order and init order follow it."""
    h, e, v, a = config.hidden_size, config.embedding_size, config.vocab_size, config.attention_hidden
    shapes = [("src_emb", (v, e)), ("tgt_emb", (v, e))]
    widths = [config.enc_input_width(1)] * 2 + [
        config.enc_input_width(l) for l in range(2, config.encoder_layers + 1)
    ]
    for prefix, w_in in zip(enc_cell_prefixes(config), widths):
        shapes += [(f"{prefix}.w_ih", (4 * h, w_in)), (f"{prefix}.w_hh", (4 * h, h)), (f"{prefix}.bias", (4 * h,))]
    for layer, prefix in enumerate(dec_cell_prefixes(config), start=1):
        w_in = config.dec_input_width(layer)
        shapes += [(f"{prefix}.w_ih", (4 * h, w_in)), (f"{prefix}.w_hh", (4 * h, h)), (f"{prefix}.bias", (4 * h,))]
    shapes += [
        ("att.w_query", (a, h)), ("att.w_keys", (a, h)), ("att.bias", (a,)), ("att.v", (a,)),
        ("out.w", (v, 2 * h)),
    ]
    return shapes


class ModelParams:
    """All trainable tensors, keyed by name in a fixed canonical order."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def cell(self, prefix: str) -> LstmCellParams:
        return LstmCellParams(
            self.tensors[f"{prefix}.w_ih"],
            self.tensors[f"{prefix}.w_hh"],
            self.tensors[f"{prefix}.bias"],
        )

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def parameter_count(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform [-0.04, 0.04] weights, zero gate biases; deterministic in seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = uniform_init(shape, rng=rng)
    return ModelParams(tensors)


def _clip(x, bound):
    return np.clip(x, -bound, bound) if bound is not None else x


# -----------------------------------------------------------------------------
# Stepwise decoding session
# -----------------------------------------------------------------------------


class DecoderState:
    """Per-layer LSTM states plus the previous bottom-layer output, all (B, h).

    Carries the last attention context and distribution for inspection.
    """

    __slots__ = ("layers", "y_prev", "context", "attn")

    def __init__(self, layers, y_prev, context=None, attn=None):
        self.layers = layers
        self.y_prev = y_prev
        self.context = context
        self.attn = attn

    def gather(self, indices) -> "DecoderState":
        idx = np.asarray(indices, dtype=np.intp)
        layers = [LstmState(s.c[idx], s.m[idx]) for s in self.layers]
        return DecoderState(
            layers,
            self.y_prev[idx],
            None if self.context is None else self.context[idx],
            None if self.attn is None else self.attn[idx],
        )


class DecodeSession:
    """One encoded source sentence, ready for stepwise decoding.

    The encoder runs once at construction; step() advances any number of
    hypotheses in parallel. Pure float64 path (the quantized counterpart
    lives in the quantize module).
    """

    def __init__(self, params: ModelParams, config: ModelConfig, source_ids):
        config.validate()
        source_ids = np.asarray(source_ids, dtype=np.intp)
        if source_ids.ndim != 1 or source_ids.size == 0:
            raise UsageError("source must be a non-empty id sequence")
        if source_ids.min() < 0 or source_ids.max() >= config.vocab_size:
            raise UsageError("source token id out of range")
        self.params = params
        self.config = config
        self.source_ids = source_ids
        self.delta = config.accumulator_clip
        enc_top, _ = _encode_forward(params, config, source_ids[None, :], self.delta)
        self.enc_top = enc_top[0]  # (M, h)
        # attention key projections are fixed per source sentence
        self.keys = self.enc_top @ params["att.w_keys"].T + params["att.bias"]  # (M, A)

    @property
    def source_len(self) -> int:
        return int(self.source_ids.size)

    def start_state(self, n: int = 1) -> DecoderState:
        h = self.config.hidden_size
        layers = [LstmState.zeros(n, h) for _ in range(self.config.decoder_layers)]
        return DecoderState(layers, np.zeros((n, h)))

    def attention(self, y_prev):
        """Context and distribution for queries y_prev (B, h) -> ((B, h), (B, M))."""
        q = y_prev @ self.params["att.w_query"].T  # (B, A)
        scores = np.tanh(q[:, None, :] + self.keys[None, :, :]) @ self.params["att.v"]
        p = softmax(scores)
        return p @ self.enc_top, p

    def step(self, state: DecoderState, tokens):
        """Advance every hypothesis by one target token.

        tokens (B,) are the previously emitted symbols (sentence-begin for
        the first step). Returns (new_state, log_probs (B, V), attn (B, M)).
        """
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim != 1 or tokens.shape[0] != state.y_prev.shape[0]:
            raise UsageError("token batch must match the state batch")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise UsageError("target token id out of range")
        params, config = self.params, self.config

        context, attn = self.attention(state.y_prev)
        stream = _clip(params["tgt_emb"][tokens], self.delta)
        new_layers = []
        y_prev = None
        for layer in range(1, config.decoder_layers + 1):
            cell = params.cell(f"dec.l{layer}")
            inp = np.concatenate([stream, context], axis=1)
            new_state, _ = lstm_cell_forward(cell, state.layers[layer - 1], inp, clip=self.delta)
            new_layers.append(new_state)
            if layer == 1:
                y_prev = new_state.m
            if config.dec_residual(layer):
                stream = _clip(new_state.m + stream, self.delta)
            else:
                stream = new_state.m
        logits = np.concatenate([stream, context], axis=1) @ params["out.w"].T
        logits = np.clip(logits, -config.logit_clip, config.logit_clip)
        return DecoderState(new_layers, y_prev, context, attn), log_softmax(logits), attn


class FloatModel:
    """Parameters plus config, packaged for the decoding front ends."""

    def __init__(self, params: ModelParams, config: ModelConfig):
        self.params = params
        self.config = config

    def open_session(self, source_ids) -> DecodeSession:
        return DecodeSession(self.params, self.config, source_ids)


def decode_step(session: DecodeSession, state: DecoderState, prev_token: int):
    """Single-hypothesis convenience wrapper around DecodeSession.step."""
    new_state, logp, attn = session.step(state, np.array([prev_token]))
    return new_state, logp[0], attn[0]


def sequence_log_prob(source_ids, target_ids, params: ModelParams, config: ModelConfig) -> float:
    """log P(target | source); the target must end with the EOS id.

    The sentence-begin symbol is prepended internally.
    """
    target_ids = list(target_ids)
    if not target_ids or target_ids[-1] != EOS_ID:
        raise UsageError("target must end with the EOS id")
    session = DecodeSession(params, config, source_ids)
    return _session_target_logprob(session, target_ids)


def _session_target_logprob(session: DecodeSession, target_ids) -> float:
    """Teacher-forced log-probability of target_ids under an open session."""
    state = session.start_state(1)
    inputs = [BOS_ID] + list(target_ids[:-1])
    total = 0.0
    for prev, want in zip(inputs, target_ids):
        state, logp, _ = session.step(state, np.array([prev]))
        total += float(logp[0, want])
    return total


# -----------------------------------------------------------------------------
# Full differentiable pass (training)
# -----------------------------------------------------------------------------


def _dropout_mask(rng, shape, p):
    if p <= 0.0:
        return None
    if rng is None:
        raise UsageError("dropout needs a random generator")
    return (rng.random(shape) >= p) / (1.0 - p)


def _encode_forward(params, config, src, delta, dropout_p=0.0, rng=None, want_cache=False):
    """Run the encoder stack on src (B, M) -> (enc_top (B, M, h), cache)."""
    B, M = src.shape
    h = config.hidden_size
    emb = params["src_emb"][src]  # (B, M, e)
    stream0 = _clip(emb, delta)
    cache = {"src": src, "stream0": stream0, "streams": [], "cells": [], "drops": [], "resid_in": []} if want_cache else None

    # layer 1, both directions
    fwd_cell = params.cell("enc.l1.fwd")
    bwd_cell = params.cell("enc.l1.bwd")
    mf = np.empty((B, M, h))
    mb = np.empty((B, M, h))
    fwd_caches, bwd_caches = [], []
    state = LstmState.zeros(B, h)
    for t in range(M):
        state, cc = lstm_cell_forward(fwd_cell, state, stream0[:, t], clip=delta)
        mf[:, t] = state.m
        if want_cache:
            fwd_caches.append(cc)
    state = LstmState.zeros(B, h)
    for t in range(M - 1, -1, -1):
        state, cc = lstm_cell_forward(bwd_cell, state, stream0[:, t], clip=delta)
        mb[:, t] = state.m
        if want_cache:
            bwd_caches.append(cc)  # stored in scan order (t = M-1 .. 0)
    out = np.concatenate([mf, mb], axis=2)  # (B, M, 2h)
    drop = _dropout_mask(rng, out.shape, dropout_p)
    if drop is not None:
        out = out * drop
    if want_cache:
        cache["cells"].append((fwd_caches, bwd_caches))
        cache["drops"].append(drop)
        cache["streams"].append(out)

    stream = out
    for layer in range(2, config.encoder_layers + 1):
        cell = params.cell(f"enc.l{layer}")
        residual = config.enc_residual(layer)
        m_all = np.empty((B, M, h))
        caches = []
        state = LstmState.zeros(B, h)
        for t in range(M):
            state, cc = lstm_cell_forward(cell, state, stream[:, t], clip=delta)
            m_all[:, t] = state.m
            if want_cache:
                caches.append(cc)
        drop = _dropout_mask(rng, m_all.shape, dropout_p)
        dropped = m_all if drop is None else m_all * drop
        if residual:
            raw = dropped + stream
            new_stream = _clip(raw, delta)
            resid_raw = raw if (want_cache and delta is not None) else None
        else:
            new_stream = dropped
            resid_raw = None
        if want_cache:
            cache["cells"].append(caches)
            cache["drops"].append(drop)
            cache["resid_in"].append(resid_raw)
            cache["streams"].append(new_stream)
        stream = new_stream
    return stream, cache


def _encode_backward(params, config, cache, d_top, grads):
    """Backpropagate d_top (B, M, h) through the encoder; returns nothing,
    accumulating parameter gradients into grads (dict of arrays)."""
    B, M, h = d_top.shape
    delta = cache["delta"]
    d_stream = d_top
    for layer in range(config.encoder_layers, 1, -1):
        idx = layer - 1  # cache position
        caches = cache["cells"][idx]
        drop = cache["drops"][idx]
        resid_raw = cache["resid_in"][layer - 2]
        residual = config.enc_residual(layer)
        below = cache["streams"][idx - 1]
        d_below = np.zeros_like(below)
        cell = params.cell(f"enc.l{layer}")
        prefix = f"enc.l{layer}"
        carry_c = np.zeros((B, h))
        carry_m = np.zeros((B, h))
        for t in range(M - 1, -1, -1):
            d_out = d_stream[:, t]
            if residual:
                if delta is not None:
                    raw = resid_raw[:, t]
                    d_out = d_out * ((raw >= -delta) & (raw <= delta))
                d_below[:, t] += d_out
            d_m = d_out if drop is None else d_out * drop[:, t]
            d_m = d_m + carry_m
            cell_grads, d_prev, d_x = lstm_cell_backward(cell, caches[t], d_c=carry_c, d_m=d_m)
            carry_c, carry_m = d_prev.c, d_prev.m
            d_below[:, t] += d_x
            grads[f"{prefix}.w_ih"] += cell_grads["w_ih"]
            grads[f"{prefix}.w_hh"] += cell_grads["w_hh"]
            grads[f"{prefix}.bias"] += cell_grads["bias"]
        d_stream = d_below

    # layer 1: undo dropout, split directions, run the two scans
    drop = cache["drops"][0]
    if drop is not None:
        d_stream = d_stream * drop
    d_mf = d_stream[:, :, :h]
    d_mb = d_stream[:, :, h:]
    fwd_caches, bwd_caches = cache["cells"][0]
    stream0 = cache["stream0"]
    d_stream0 = np.zeros_like(stream0)

    fwd_cell = params.cell("enc.l1.fwd")
    carry_c = np.zeros((B, h))
    carry_m = np.zeros((B, h))
    for t in range(M - 1, -1, -1):
        cell_grads, d_prev, d_x = lstm_cell_backward(
            fwd_cell, fwd_caches[t], d_c=carry_c, d_m=d_mf[:, t] + carry_m
        )
        carry_c, carry_m = d_prev.c, d_prev.m
        d_stream0[:, t] += d_x
        grads["enc.l1.fwd.w_ih"] += cell_grads["w_ih"]
        grads["enc.l1.fwd.w_hh"] += cell_grads["w_hh"]
        grads["enc.l1.fwd.bias"] += cell_grads["bias"]

    # the right-to-left scan stored caches in scan order (t = M-1 .. 0), so
    # its reverse-mode sweep walks source positions t = 0 .. M-1
    bwd_cell = params.cell("enc.l1.bwd")
    carry_c = np.zeros((B, h))
    carry_m = np.zeros((B, h))
    for i in range(M - 1, -1, -1):
        t = M - 1 - i
        cell_grads, d_prev, d_x = lstm_cell_backward(
            bwd_cell, bwd_caches[i], d_c=carry_c, d_m=d_mb[:, t] + carry_m
        )
        carry_c, carry_m = d_prev.c, d_prev.m
        d_stream0[:, t] += d_x
        grads["enc.l1.bwd.w_ih"] += cell_grads["w_ih"]
        grads["enc.l1.bwd.w_hh"] += cell_grads["w_hh"]
        grads["enc.l1.bwd.bias"] += cell_grads["bias"]

    if delta is not None:
        emb = params["src_emb"][cache["src"]]
        d_stream0 = d_stream0 * ((emb >= -delta) & (emb <= delta))
    np.add.at(grads["src_emb"], cache["src"], d_stream0)


def forward_backward_batch(
    params: ModelParams,
    config: ModelConfig,
    src: np.ndarray,
    tgt: np.ndarray,
    *,
    delta=None,
    dropout_prob: float = 0.0,
    rng=None,
    pair_weights=None,
    require_eos: bool = True,
):
    """Loss and gradients for a batch of equal-length pairs.

    src (B, M) and tgt (B, N) are id matrices; every target row must end in
    EOS (relaxed via require_eos for max-length-truncated sampled
    sequences). Returns (per_pair_nll (B,), grads) where grads accumulates
    the weighted sum over pairs of d(nll_b)/d(theta) (weights default to 1).
    """
    config.validate()
    src = np.asarray(src, dtype=np.intp)
    tgt = np.asarray(tgt, dtype=np.intp)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[0] != tgt.shape[0]:
        raise ShapeError("src and tgt must be (B, M) and (B, N)")
    if src.size == 0 or tgt.size == 0:
        raise UsageError("empty batch")
    if require_eos and np.any(tgt[:, -1] != EOS_ID):
        raise UsageError("every target must end with the EOS id")
    if max(src.max(), tgt.max()) >= config.vocab_size or min(src.min(), tgt.min()) < 0:
        raise UsageError("token id out of range")
    B, M = src.shape
    N = tgt.shape[1]
    h = config.hidden_size
    if pair_weights is None:
        pair_weights = np.ones(B)
    pair_weights = np.asarray(pair_weights, dtype=np.float64)

    enc_top, enc_cache = _encode_forward(
        params, config, src, delta, dropout_p=dropout_prob, rng=rng, want_cache=True
    )
    enc_cache["delta"] = delta
    keys = enc_top @ params["att.w_keys"].T + params["att.bias"]  # (B, M, A)

    y_in = np.concatenate([np.full((B, 1), BOS_ID, dtype=np.intp), tgt[:, :-1]], axis=1)
    emb_in = params["tgt_emb"][y_in]  # (B, N, e)
    stream0 = _clip(emb_in, delta)

    layer_states = [LstmState.zeros(B, h) for _ in range(config.decoder_layers)]
    y_prev = np.zeros((B, h))
    steps = []
    nll = np.zeros(B)
    w_out = params["out.w"]
    for i in range(N):
        q = y_prev @ params["att.w_query"].T
        pre_tanh = np.tanh(q[:, None, :] + keys)  # (B, M, A)
        scores = pre_tanh @ params["att.v"]
        p = softmax(scores)
        context = np.einsum("bm,bmh->bh", p, enc_top)

        stream = stream0[:, i]
        cells = []
        drops = []
        resid_raws = []
        for layer in range(1, config.decoder_layers + 1):
            cell = params.cell(f"dec.l{layer}")
            inp = np.concatenate([stream, context], axis=1)
            new_state, cc = lstm_cell_forward(cell, layer_states[layer - 1], inp, clip=delta)
            layer_states[layer - 1] = new_state
            cells.append(cc)
            drop = _dropout_mask(rng, new_state.m.shape, dropout_prob)
            drops.append(drop)
            dropped = new_state.m if drop is None else new_state.m * drop
            if layer == 1:
                new_y_prev = new_state.m
            if config.dec_residual(layer):
                raw = dropped + stream
                resid_raws.append(raw if delta is not None else None)
                stream = _clip(raw, delta)
            else:
                resid_raws.append(None)
                stream = dropped
        y = np.concatenate([stream, context], axis=1)
        logits_raw = y @ w_out.T
        logits = np.clip(logits_raw, -config.logit_clip, config.logit_clip)
        logp = log_softmax(logits)
        nll -= logp[np.arange(B), tgt[:, i]]
        steps.append(
            {
                "pre_tanh": pre_tanh, "p": p, "context": context, "y_prev": y_prev,
                "cells": cells, "drops": drops, "resid_raws": resid_raws,
                "y": y, "logits_raw": logits_raw, "probs": softmax(logits),
            }
        )
        y_prev = new_y_prev

    # ---- backward ----
    grads = params.zeros_like()
    d_enc_top = np.zeros_like(enc_top)
    d_keys = np.zeros_like(keys)
    d_carry = [(np.zeros((B, h)), np.zeros((B, h))) for _ in range(config.decoder_layers)]
    d_y_prev_carry = np.zeros((B, h))
    d_stream0 = np.zeros_like(stream0)
    w_query, w_keys_m, v_att = params["att.w_query"], params["att.w_keys"], params["att.v"]

    for i in range(N - 1, -1, -1):
        st = steps[i]
        d_logits = st["probs"].copy()
        d_logits[np.arange(B), tgt[:, i]] -= 1.0
        d_logits *= pair_weights[:, None]
        inside = (st["logits_raw"] >= -config.logit_clip) & (st["logits_raw"] <= config.logit_clip)
        d_logits *= inside
        grads["out.w"] += d_logits.T @ st["y"]
        d_y = d_logits @ w_out
        d_stream = d_y[:, :h]
        d_context = d_y[:, h:]

        for layer in range(config.decoder_layers, 0, -1):
            cc = st["cells"][layer - 1]
            drop = st["drops"][layer - 1]
            d_out = d_stream
            if config.dec_residual(layer):
                if delta is not None:
                    raw = st["resid_raws"][layer - 1]
                    d_out = d_out * ((raw >= -delta) & (raw <= delta))
                d_below = d_out
            else:
                d_below = 0.0
            d_m = d_out if drop is None else d_out * drop
            carry_c, carry_m = d_carry[layer - 1]
            d_m = d_m + carry_m
            if layer == 1:
                d_m = d_m + d_y_prev_carry
            prefix = f"dec.l{layer}"
            cell = params.cell(prefix)
            cell_grads, d_prev, d_inp = lstm_cell_backward(cell, cc, d_c=carry_c, d_m=d_m)
            d_carry[layer - 1] = (d_prev.c, d_prev.m)
            grads[f"{prefix}.w_ih"] += cell_grads["w_ih"]
            grads[f"{prefix}.w_hh"] += cell_grads["w_hh"]
            grads[f"{prefix}.bias"] += cell_grads["bias"]
            stream_w = config.embedding_size if layer == 1 else h
            d_stream = d_below + d_inp[:, :stream_w]
            d_context = d_context + d_inp[:, stream_w:]
        d_stream0[:, i] += d_stream

        # attention backward for this step
        p, pre_tanh, y_prev_i = st["p"], st["pre_tanh"], st["y_prev"]
        d_p = np.einsum("bh,bmh->bm", d_context, enc_top)
        d_enc_top += p[:, :, None] * d_context[:, None, :]
        d_scores = p * (d_p - (d_p * p).sum(axis=1, keepdims=True))
        d_pre = d_scores[:, :, None] * v_att * (1.0 - pre_tanh * pre_tanh)
        grads["att.v"] += np.einsum("bma,bm->a", pre_tanh, d_scores)
        d_q = d_pre.sum(axis=1)
        grads["att.w_query"] += d_q.T @ y_prev_i
        d_keys += d_pre
        d_y_prev_carry = d_q @ w_query

    grads["att.bias"] += d_keys.sum(axis=(0, 1))
    grads["att.w_keys"] += np.einsum("bma,bmh->ah", d_keys, enc_top)
    d_enc_top += d_keys @ w_keys_m

    if delta is not None:
        d_stream0 = d_stream0 * ((emb_in >= -delta) & (emb_in <= delta))
    np.add.at(grads["tgt_emb"], y_in, d_stream0)

    _encode_backward(params, config, enc_cache, d_enc_top, grads)
    return nll, grads


def forward_backward(
    source_ids,
    target_ids,
    params: ModelParams,
    config: ModelConfig,
    dropout_prob: float = 0.0,
    *,
    delta=None,
    rng=None,
):
    """Loss (-log P(target|source)) and its gradients for one pair."""
    src = np.asarray(source_ids, dtype=np.intp)[None, :]
    tgt = np.asarray(target_ids, dtype=np.intp)[None, :]
    nll, grads = forward_backward_batch(
        params, config, src, tgt, delta=delta, dropout_prob=dropout_prob, rng=rng
    )
    return float(nll[0]), grads


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

MAGIC = b"MINIMTCK"
FORMAT_VERSION = 1
KIND_FLOAT = 0
KIND_QUANTIZED = 1


def _write_block(fh, payload: bytes):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("checkpoint file is truncated")
    return data


def _read_block(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def write_container(path, kind: int, config: ModelConfig, entries):
    """Shared checkpoint container.

    entries is a list of (name, payload_kind, payload_bytes_parts) where
    payload_kind 0 is a float64 array and 1 a quantized matrix; this module
    writes only kind-0 entries, the quantize module reuses the container.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IB", FORMAT_VERSION, kind))
        _write_block(fh, config.to_text().encode("utf-8"))
        fh.write(struct.pack("<I", len(entries)))
        for name, payload_kind, shape, payload in entries:
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", payload_kind, len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            _write_block(fh, payload)


def read_container(path):
    """Returns (kind, config, entries) with entries (name, kind, shape, bytes)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
        version, kind = struct.unpack("<IB", _read_exact(fh, 5))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        config = ModelConfig.from_text(_read_block(fh).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            payload_kind, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            entries.append((name, payload_kind, shape, _read_block(fh)))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return kind, config, entries


def float_entry(name: str, array: np.ndarray):
    return (name, 0, array.shape, np.ascontiguousarray(array, dtype="<f8").tobytes())


def entry_to_array(shape, payload: bytes) -> np.ndarray:
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(payload) != expected:
        raise FormatError("checkpoint entry payload size mismatch")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    entries = [float_entry(name, params[name]) for name, _ in param_shapes(config)]
    write_container(path, KIND_FLOAT, config, entries)


def load_checkpoint(path):
    kind, config, raw = read_container(path)
    if kind != KIND_FLOAT:
        raise FormatError(f"{path}: holds a quantized model, not float parameters")
    expected = dict(param_shapes(config))
    tensors = {}
    for name, payload_kind, shape, payload in raw:
        if payload_kind != 0:
            raise FormatError(f"{path}: unexpected payload kind for {name}")
        tensors[name] = entry_to_array(shape, payload)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise FormatError(f"{path}: parameter {name} missing or mis-shaped")
    return ModelParams(tensors), config
