"""Scratch: finite-difference check of forward_backward_batch."""
import numpy as np

from minimt.model import ModelConfig, init_params, forward_backward, sequence_log_prob
from minimt.segmentation import EOS_ID

rng = np.random.default_rng(0)

config = ModelConfig(
    vocab_size=9, hidden_size=4, embedding_size=3,
    encoder_layers=3, decoder_layers=3, residual_start_layer=3,
    attention_hidden=3, logit_clip=25.0,
).validate()
params = init_params(config, seed=1)
# scale up so gradients are not vanishing-small
for k in params.tensors:
    params.tensors[k] = params.tensors[k] * 10.0

src = [4, 5, 6, 7]
tgt = [5, 6, 4, EOS_ID]

loss, grads = forward_backward(src, tgt, params, config)
print("loss", loss, "ref", -sequence_log_prob(src, tgt, params, config))

eps = 1e-5
worst = 0.0
worst_name = None
for name, tensor in params.tensors.items():
    flat = tensor.reshape(-1)
    g = grads[name].reshape(-1)
    idxs = rng.choice(flat.size, size=min(12, flat.size), replace=False)
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        lp = -sequence_log_prob(src, tgt, params, config)
        flat[i] = orig - eps
        lm = -sequence_log_prob(src, tgt, params, config)
        flat[i] = orig
        fd = (lp - lm) / (2 * eps)
        rel = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8)
        if rel > worst:
            worst, worst_name = rel, (name, int(i), fd, g[i])
print("worst rel error:", worst, worst_name)

# clip-mode check away from boundaries (delta large) and with delta active
loss_c, grads_c = forward_backward(src, tgt, params, config, delta=0.5)
worst = 0.0
for name, tensor in params.tensors.items():
    flat = tensor.reshape(-1)
    g = grads_c[name].reshape(-1)
    idxs = rng.choice(flat.size, size=min(8, flat.size), replace=False)
    for i in idxs:
        orig = flat[i]

        def loss_at(val):
            flat[i] = val
            from minimt.model import forward_backward_batch
            nll, _ = forward_backward_batch(
                params, config, np.array([src]), np.array([tgt]), delta=0.5)
            flat[i] = orig
            return float(nll[0])

        fd = (loss_at(orig + eps) - loss_at(orig - eps)) / (2 * eps)
        rel = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6)
        worst = max(worst, rel)
print("worst rel error (delta=0.5):", worst)
