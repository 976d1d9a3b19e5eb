"""
Optimization: likelihood training, sampled expected-reward refinement, and
the Adam-then-SGD schedule with learning-rate halving, global-norm gradient
clipping, and the annealed memory-clip bound used for quantization-aware
training.

Loss conventions: the likelihood loss is the mean per-pair negative sequence
log-probability, so learning rates transfer across batch sizes. The reward
loss is a score-function estimator: per source sentence, draw m samples,
reward each with GLEU against the reference, and weight the gradient of each
sample's negative log-probability by its reward centered with the
leave-one-out sample mean. Leave-one-out centering keeps the estimator an
unbiased estimate of the expected-reward gradient (the plain sample mean
shrinks it by 1 - 1/m); the centering is carried out in exact rational
arithmetic so that shifting every reward by a constant cancels bitwise.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .decode import greedy_decode
from .errors import ConfigError, UsageError
from .metrics import corpus_bleu, gleu
from .model import (
    FloatModel,
    ModelConfig,
    ModelParams,
    forward_backward_batch,
)
from .numerics import global_norm
from .segmentation import BOS_ID, EOS_ID


@dataclass
class TrainConfig:
    total_steps: int
    seed: int
    batch_size: int = 128
    adam_steps: int = 400
    adam_lr: float = 0.0002
    sgd_lr: float = 0.5
    anneal_start: int | None = None  # default: no annealing at desk scale
    anneal_interval: int = 200
    anneal_factor: float = 0.5
    grad_norm_cap: float = 5.0
    dropout_prob: float = 0.2
    mix_alpha: float = 0.017
    rl_samples: int = 15
    rl_lr: float | None = None  # default sgd_lr / 10
    delta_start: float = 8.0
    delta_end: float = 1.0
    delta_anneal_steps: int | None = None  # default: anneal over total_steps
    quantization_aware: bool = False
    eval_interval: int = 200
    patience: int = 2
    checkpoint_interval: int = 0  # 0: only the final/best checkpoints

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if min(self.adam_lr, self.sgd_lr, self.anneal_factor) <= 0:
            raise ConfigError("learning rates and anneal factor must be positive")
        if self.batch_size < 1 or self.adam_steps < 0:
            raise ConfigError("batch_size must be >= 1 and adam_steps >= 0")
        if self.grad_norm_cap <= 0:
            raise ConfigError("grad_norm_cap must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError("dropout_prob must lie in [0, 1)")
        if self.mix_alpha < 0:
            raise ConfigError("mix_alpha must be non-negative")
        if self.rl_samples != 0 and self.rl_samples < 2:
            raise ConfigError("rl_samples must be >= 2 (or the 0 sentinel)")
        if not 1.0 <= self.delta_end <= self.delta_start:
            raise ConfigError("delta schedule must run from delta_start down to delta_end >= 1")
        return self


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    lr: float = 0.0
    delta: float | None = None


def delta_at(config: TrainConfig, step: int):
    """Clip bound annealed linearly from delta_start to delta_end over
    delta_anneal_steps (the whole run by default), then held; None when the
    run is not quantization-aware."""
    if not config.quantization_aware:
        return None
    horizon = config.delta_anneal_steps or config.total_steps
    frac = min(1.0, step / horizon)
    return config.delta_start + (config.delta_end - config.delta_start) * frac


def learning_rate(config: TrainConfig, step: int) -> float:
    if step < config.adam_steps:
        return config.adam_lr
    lr = config.sgd_lr
    if config.anneal_start is not None and step >= config.anneal_start:
        halvings = (step - config.anneal_start) // config.anneal_interval
        lr *= config.anneal_factor ** halvings
    return lr


def phase_at(config: TrainConfig, step: int) -> str:
    return "adam" if step < config.adam_steps else "sgd"


# -----------------------------------------------------------------------------
# Losses
# -----------------------------------------------------------------------------


def _grouped_batches(pairs):
    """Group pairs by (source length, target length), preserving order, so
    each group runs as one padded-free tensor pass."""
    groups = {}
    for src, tgt in pairs:
        groups.setdefault((len(src), len(tgt)), []).append((src, tgt))
    return groups


def ml_loss(batch, params: ModelParams, config: ModelConfig, *, delta=None,
            dropout_prob: float = 0.0, rng=None):
    """Mean per-pair negative log-likelihood and its gradients."""
    if not batch:
        raise UsageError("empty batch")
    grads = params.zeros_like()
    total = 0.0
    for (_, _), group in _grouped_batches(batch).items():
        src = np.array([s for s, _ in group], dtype=np.intp)
        tgt = np.array([t for _, t in group], dtype=np.intp)
        nll, g = forward_backward_batch(
            params, config, src, tgt, delta=delta, dropout_prob=dropout_prob, rng=rng
        )
        total += float(nll.sum())
        for name in grads:
            grads[name] += g[name]
    scale = 1.0 / len(batch)
    for name in grads:
        grads[name] *= scale
    return total * scale, grads


def sample_sequences(source_ids, params: ModelParams, config: ModelConfig,
                     m: int, max_len: int, seed=None, *, rng=None, delta=None):
    """Draw m target sequences by ancestral sampling.

    Sampling stops per sequence at EOS or after max_len tokens. Returns a
    list of (tokens, log_prob) where log_prob sums the sampled tokens'
    step log-probabilities (no EOS factor is added for truncated sequences).
    """
    if m < 1 or max_len < 1:
        raise UsageError("need m >= 1 and max_len >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    session = FloatModel(params, config).open_session(source_ids)
    state = session.start_state(m)
    prev = np.full(m, BOS_ID, dtype=np.intp)
    alive = np.ones(m, dtype=bool)
    tokens = [[] for _ in range(m)]
    log_probs = np.zeros(m)
    for _ in range(max_len):
        state, logp, _ = session.step(state, prev)
        cumulative = np.cumsum(np.exp(logp), axis=1)
        draws = rng.random((m, 1)) * cumulative[:, -1:]
        picks = (cumulative < draws).sum(axis=1)
        picks = np.minimum(picks, logp.shape[1] - 1)
        for k in range(m):
            if not alive[k]:
                continue
            token = int(picks[k])
            tokens[k].append(token)
            log_probs[k] += logp[k, token]
            if token == EOS_ID:
                alive[k] = False
        if not alive.any():
            break
        prev = np.where(alive, picks, EOS_ID).astype(np.intp)
    return [(tokens[k], float(log_probs[k])) for k in range(m)]


def centered_reward_weights(rewards, m: int):
    """Leave-one-out centered weights (r_k - mean of the others) / m.

    Computed with exact rationals so a constant shift of every reward
    cancels exactly: weight_k = (m * r_k - sum_j r_j) / (m * (m - 1)).
    """
    if m < 2:
        raise UsageError("the reward baseline needs at least two samples")
    fracs = [Fraction(float(r)) for r in rewards]
    total = sum(fracs)
    denom = m * (m - 1)
    return np.array([float((m * f - total) / denom) for f in fracs])


def rl_loss(batch, params: ModelParams, config: ModelConfig, m: int, seed,
            *, delta=None, max_len_factor: float = 2.0, reward_fn=None):
    """Score-function gradient of the negative expected per-sentence reward.

    For each pair, m sequences are sampled, rewarded (GLEU against the
    reference by default, over content tokens without EOS), centered, and
    each sample's negative-log-probability gradient is weighted by its
    centered reward. Samples that agree word for word share one backward
    pass. The scalar is the negative mean sampled reward.
    """
    if not batch:
        raise UsageError("empty batch")
    if reward_fn is None:
        reward_fn = gleu
    grads = params.zeros_like()
    seeds = np.random.SeedSequence(seed).spawn(len(batch))
    mean_reward = 0.0
    for (src, ref), child in zip(batch, seeds):
        max_len = max(1, math.ceil(len(src) * max_len_factor))
        rng = np.random.default_rng(child)
        samples = sample_sequences(src, params, config, m, max_len, rng=rng, delta=delta)
        ref_content = list(ref[:-1]) if ref and ref[-1] == EOS_ID else list(ref)
        rewards = []
        for tokens, _ in samples:
            content = tokens[:-1] if tokens and tokens[-1] == EOS_ID else tokens
            rewards.append(reward_fn(content, ref_content))
        weights = centered_reward_weights(rewards, m)
        mean_reward += float(np.mean(rewards))

        by_target = {}
        for (tokens, _), w in zip(samples, weights):
            if w == 0.0:
                continue
            key = tuple(tokens)
            by_target[key] = by_target.get(key, 0.0) + w
        by_length = {}
        for key, w in by_target.items():
            by_length.setdefault(len(key), []).append((key, w))
        for length, items in sorted(by_length.items()):
            tgt = np.array([list(k) for k, _ in items], dtype=np.intp)
            w = np.array([w for _, w in items])
            src_rows = np.tile(np.asarray(src, dtype=np.intp), (len(items), 1))
            _, g = forward_backward_batch(
                params, config, src_rows, tgt, delta=delta,
                pair_weights=w, require_eos=False,
            )
            for name in grads:
                grads[name] += g[name]
    scale = 1.0 / len(batch)
    for name in grads:
        grads[name] *= scale
    return -mean_reward * scale, grads


def mixed_loss(batch, params: ModelParams, config: ModelConfig,
               train_config: TrainConfig, seed, *, delta=None):
    """alpha * likelihood objective + expected-reward objective.

    rl_samples = 0 turns the reward term off; dropout stays off here since
    refinement never uses it.
    """
    alpha = train_config.mix_alpha
    ml_l, ml_g = ml_loss(batch, params, config, delta=delta)
    if train_config.rl_samples == 0:
        for name in ml_g:
            ml_g[name] *= alpha
        return alpha * ml_l, ml_g
    rl_l, rl_g = rl_loss(
        batch, params, config, train_config.rl_samples, seed, delta=delta
    )
    for name in rl_g:
        rl_g[name] += alpha * ml_g[name]
    return alpha * ml_l + rl_l, rl_g


# -----------------------------------------------------------------------------
# Parameter updates
# -----------------------------------------------------------------------------


def apply_update(state: OptimizerState, params: ModelParams, grads: dict,
                 config: TrainConfig):
    """Clip gradients to the global-norm cap and take one Adam or SGD step.

    Advances the step counter and the clip-bound schedule; returns the
    pre-clip gradient norm.
    """
    step = state.step
    lr = learning_rate(config, step)
    raw_norm = global_norm(list(grads.values()))
    if raw_norm > config.grad_norm_cap and raw_norm > 0:
        scale = config.grad_norm_cap / raw_norm
        grads = {name: g * scale for name, g in grads.items()}

    if step < config.adam_steps:
        if not state.adam_m:
            state.adam_m = {n: np.zeros_like(v) for n, v in params.tensors.items()}
            state.adam_v = {n: np.zeros_like(v) for n, v in params.tensors.items()}
        t = step + 1
        for name, g in grads.items():
            state.adam_m[name] = ADAM_BETA1 * state.adam_m[name] + (1 - ADAM_BETA1) * g
            state.adam_v[name] = ADAM_BETA2 * state.adam_v[name] + (1 - ADAM_BETA2) * g * g
            m_hat = state.adam_m[name] / (1 - ADAM_BETA1 ** t)
            v_hat = state.adam_v[name] / (1 - ADAM_BETA2 ** t)
            params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    else:
        for name, g in grads.items():
            params[name] = params[name] - lr * g

    state.step = step + 1
    state.lr = lr
    state.delta = delta_at(config, state.step)
    return raw_norm


def train_step(state: OptimizerState, batch, params: ModelParams,
               model_config: ModelConfig, config: TrainConfig, rng):
    """One likelihood-phase step: loss, clip, update, schedule advance.

    Returns a stats dict for the training log. A non-finite loss aborts.
    """
    delta = delta_at(config, state.step)
    loss, grads = ml_loss(
        batch, params, model_config, delta=delta,
        dropout_prob=config.dropout_prob, rng=rng,
    )
    if not math.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss {loss} at step {state.step}; "
            "lower the learning rate or check the data"
        )
    phase = phase_at(config, state.step)
    norm = apply_update(state, params, grads, config)
    return {
        "step": state.step, "phase": phase, "loss": loss,
        "grad_norm": norm, "lr": state.lr, "delta": delta,
    }


def format_log_line(stats: dict) -> str:
    delta = stats["delta"]
    return "\t".join(
        [
            str(stats["step"]), stats["phase"], f"{stats['loss']:.6f}",
            f"{stats['grad_norm']:.6f}", f"{stats['lr']:.6g}",
            "-" if delta is None else f"{delta:.4f}",
        ]
    )


# -----------------------------------------------------------------------------
# Training loops
# -----------------------------------------------------------------------------


def _batch_stream(n_pairs: int, batch_size: int, rng):
    """Endless deterministic stream of index batches, reshuffled per epoch."""
    while True:
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) == batch_size or n_pairs < batch_size:
                yield chunk


def evaluate_bleu(pairs, params: ModelParams, config: ModelConfig) -> float:
    """Corpus BLEU of greedy decodes against the references."""
    model = FloatModel(params, config)
    hyps, refs = [], []
    for src, ref in pairs:
        out = greedy_decode(src, model)
        hyps.append(out[:-1] if out and out[-1] == EOS_ID else out)
        refs.append(list(ref[:-1]))
    return corpus_bleu(hyps, refs)


def run_training(pairs, dev_pairs, params: ModelParams, model_config: ModelConfig,
                 config: TrainConfig, *, log_fn=None, checkpoint_fn=None,
                 state: OptimizerState | None = None):
    """Likelihood training with the Adam-then-SGD schedule.

    Evaluates dev BLEU every eval_interval steps and returns
    (best_params, state, history); with no dev set the final parameters win.
    checkpoint_fn(step, params) fires every checkpoint_interval steps.
    Fully deterministic for a fixed seed.
    """
    config.validate()
    model_config.validate()
    if state is None:
        state = OptimizerState(delta=delta_at(config, 0))
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x7261696E)))
    batches = _batch_stream(len(pairs), config.batch_size, rng)
    # skip the stream forward on resume so batch order continues exactly
    for _ in range(state.step):
        next(batches)

    best = None
    best_bleu = -1.0
    history = []
    while state.step < config.total_steps:
        idx = next(batches)
        batch = [pairs[i] for i in idx]
        stats = train_step(state, batch, params, model_config, config, rng)
        history.append(stats)
        if log_fn is not None:
            log_fn(format_log_line(stats))
        if dev_pairs and state.step % config.eval_interval == 0:
            bleu = evaluate_bleu(dev_pairs, params, model_config)
            if log_fn is not None:
                log_fn(f"# dev_bleu\t{state.step}\t{bleu:.4f}")
            if bleu > best_bleu:
                best_bleu = bleu
                best = params.copy()
        if checkpoint_fn is not None and config.checkpoint_interval > 0 \
                and state.step % config.checkpoint_interval == 0:
            checkpoint_fn(state.step, params)
    if dev_pairs:
        final_bleu = evaluate_bleu(dev_pairs, params, model_config)
        if final_bleu >= best_bleu:
            best, best_bleu = params.copy(), final_bleu
    return (best if best is not None else params), state, history


def save_train_state(state: OptimizerState, model_config: ModelConfig, path) -> None:
    """Persist the optimizer state (step counter plus Adam moments) so a run
    can resume with its step counter intact."""
    from .model import KIND_FLOAT, float_entry, write_container

    entries = [float_entry("step", np.array([float(state.step)]))]
    for name, value in state.adam_m.items():
        entries.append(float_entry(f"adam_m.{name}", value))
    for name, value in state.adam_v.items():
        entries.append(float_entry(f"adam_v.{name}", value))
    write_container(path, KIND_FLOAT, model_config, entries)


def load_train_state(path, model_config: ModelConfig) -> OptimizerState:
    from .errors import FormatError
    from .model import KIND_FLOAT, entry_to_array, read_container

    kind, _, raw = read_container(path)
    if kind != KIND_FLOAT:
        raise FormatError(f"{path}: not a training-state file")
    state = OptimizerState()
    for name, payload_kind, shape, payload in raw:
        if payload_kind != 0:
            raise FormatError(f"{path}: unexpected payload kind for {name}")
        array = entry_to_array(shape, payload)
        if name == "step":
            state.step = int(array[0])
        elif name.startswith("adam_m."):
            state.adam_m[name[len("adam_m."):]] = array
        elif name.startswith("adam_v."):
            state.adam_v[name[len("adam_v."):]] = array
    return state


def refine_with_rl(params: ModelParams, train_pairs, dev_pairs,
                   model_config: ModelConfig, config: TrainConfig, *, log_fn=None):
    """Mixed-objective SGD refinement until dev BLEU stops improving.

    Starts from likelihood-trained parameters, evaluates dev BLEU every
    eval_interval steps, stops after `patience` evaluations without
    improvement, and returns the best-scoring parameters. Dropout is off
    throughout; the clip bound stays at its inference value.
    """
    config.validate()
    if not dev_pairs:
        raise UsageError("refinement needs a development set")
    delta = model_config.accumulator_clip
    lr = config.rl_lr if config.rl_lr is not None else config.sgd_lr / 10.0
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x726C)))
    batches = _batch_stream(len(train_pairs), config.batch_size, rng)

    params = params.copy()
    best = params.copy()
    best_bleu = evaluate_bleu(dev_pairs, params, model_config)
    if log_fn is not None:
        log_fn(f"# dev_bleu\t0\t{best_bleu:.4f}")
    bad_evals = 0
    step = 0
    while bad_evals < config.patience:
        for _ in range(config.eval_interval):
            idx = next(batches)
            batch = [train_pairs[i] for i in idx]
            loss, grads = mixed_loss(
                batch, params, model_config, config, (config.seed, step), delta=delta
            )
            if not math.isfinite(loss):
                raise RuntimeError(f"non-finite refinement loss at step {step}")
            raw_norm = global_norm(list(grads.values()))
            if raw_norm > config.grad_norm_cap and raw_norm > 0:
                scale = config.grad_norm_cap / raw_norm
                grads = {n: g * scale for n, g in grads.items()}
            for name, g in grads.items():
                params[name] = params[name] - lr * g
            step += 1
            if log_fn is not None:
                log_fn("\t".join(
                    [str(step), "rl", f"{loss:.6f}", f"{raw_norm:.6f}", f"{lr:.6g}",
                     "-" if delta is None else f"{delta:.4f}"]
                ))
        bleu = evaluate_bleu(dev_pairs, params, model_config)
        if log_fn is not None:
            log_fn(f"# dev_bleu\t{step}\t{bleu:.4f}")
        if bleu > best_bleu:
            best_bleu = bleu
            best = params.copy()
            bad_evals = 0
        else:
            bad_evals += 1
    return best
