"""
Finite-difference verification of the hand-written backward passes.

Central differences of the sequence loss are compared against the analytic
gradients, component by component, over randomized small model shapes. The
relative error uses an absolute floor so that components whose true gradient
is at roundoff scale do not dominate:

    rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
"""

import numpy as np

from .model import ModelConfig, forward_backward, init_params, sequence_log_prob
from .numerics import LstmCellParams, LstmState, lstm_cell_backward, lstm_cell_forward
from .segmentation import EOS_ID

EPSILON = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-6


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def check_lstm_cell(seed=0, hidden=2, inputs=3, batch=2) -> float:
    """Max relative error of the cell backward on one random instance."""
    rng = np.random.default_rng(seed)
    params = LstmCellParams(
        rng.normal(0, 0.5, (4 * hidden, inputs)),
        rng.normal(0, 0.5, (4 * hidden, hidden)),
        rng.normal(0, 0.5, 4 * hidden),
    )
    prev = LstmState(rng.normal(0, 0.5, (batch, hidden)), rng.normal(0, 0.5, (batch, hidden)))
    x = rng.normal(0, 0.5, (batch, inputs))
    w_c = rng.normal(0, 1.0, (batch, hidden))
    w_m = rng.normal(0, 1.0, (batch, hidden))

    def loss():
        state, _ = lstm_cell_forward(params, prev, x)
        return float((state.c * w_c).sum() + (state.m * w_m).sum())

    _, cache = lstm_cell_forward(params, prev, x)
    grads, d_prev, d_x = lstm_cell_backward(params, cache, d_c=w_c, d_m=w_m)
    flat = [
        (params.w_ih, grads["w_ih"]), (params.w_hh, grads["w_hh"]), (params.bias, grads["bias"]),
        (prev.c, d_prev.c), (prev.m, d_prev.m), (x, d_x),
    ]
    worst = 0.0
    for tensor, grad in flat:
        t = tensor.reshape(-1)
        g = grad.reshape(-1)
        for k in range(t.size):
            orig = t[k]
            t[k] = orig + EPSILON
            up = loss()
            t[k] = orig - EPSILON
            down = loss()
            t[k] = orig
            worst = max(worst, relative_error(g[k], (up - down) / (2 * EPSILON)))
    return worst


def random_model_case(rng):
    """A randomized small config plus a compatible source/target pair."""
    config = ModelConfig(
        vocab_size=int(rng.integers(6, 13)),
        hidden_size=int(rng.integers(3, 9)),
        embedding_size=int(rng.integers(2, 6)),
        encoder_layers=int(rng.integers(2, 5)),
        decoder_layers=int(rng.integers(2, 5)),
        residual_start_layer=3,
        attention_hidden=int(rng.integers(2, 6)),
    ).validate()
    src = rng.integers(4, config.vocab_size, size=int(rng.integers(2, 5))).tolist()
    tgt = rng.integers(4, config.vocab_size, size=int(rng.integers(1, 4))).tolist() + [EOS_ID]
    return config, src, tgt


def check_model(seed=0, components_per_tensor=None, corrupt=None):
    """Check every parameter of a random small model against central FD.

    components_per_tensor limits how many entries of each tensor are probed
    (None probes all of them). corrupt, if given, perturbs the analytic
    gradient dict first; it exists so tests can prove the check would fail.
    Returns (max_rel_error, per_tensor dict).
    """
    rng = np.random.default_rng(seed)
    config, src, tgt = random_model_case(rng)
    params = init_params(config, seed=int(rng.integers(0, 2**31)))
    # initialization is deliberately tiny; scale up so gradients carry signal
    for name in params.tensors:
        params.tensors[name] = params.tensors[name] * 12.0

    _, grads = forward_backward(src, tgt, params, config)
    if corrupt is not None:
        corrupt(grads)

    report = {}
    worst = 0.0
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        grad = grads[name].reshape(-1)
        if components_per_tensor is None or components_per_tensor >= flat.size:
            probe = np.arange(flat.size)
        else:
            probe = rng.choice(flat.size, size=components_per_tensor, replace=False)
        tensor_worst = 0.0
        for k in probe:
            orig = flat[k]
            flat[k] = orig + EPSILON
            up = -sequence_log_prob(src, tgt, params, config)
            flat[k] = orig - EPSILON
            down = -sequence_log_prob(src, tgt, params, config)
            flat[k] = orig
            tensor_worst = max(tensor_worst, relative_error(grad[k], (up - down) / (2 * EPSILON)))
        report[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return worst, report


def run_gradient_checks(seed=0, cases=3, components_per_tensor=None, corrupt=None):
    """Run the cell check plus `cases` randomized full-model checks.

    Returns a report dict with per-case worst errors and an overall
    pass/fail flag at the 1e-4 tolerance.
    """
    results = {"lstm_cell": check_lstm_cell(seed)}
    rng = np.random.default_rng(seed)
    for case in range(cases):
        worst, _ = check_model(
            int(rng.integers(0, 2**31)),
            components_per_tensor=components_per_tensor,
            corrupt=corrupt,
        )
        results[f"model_case_{case}"] = worst
    results["max"] = max(results.values())
    results["passed"] = results["max"] < TOLERANCE
    return results
