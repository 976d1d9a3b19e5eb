"""Scratch: 10-pair memorization sanity + lr sweep."""
import time

import numpy as np

from minimt.model import ModelConfig, init_params
from minimt.training import TrainConfig, OptimizerState, train_step, evaluate_bleu
from minimt.segmentation import EOS_ID


def reversal_corpus(n_pairs, seed, lengths=(3, 8), vocab=20):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lengths[0], lengths[1] + 1))
        src = rng.integers(4, 4 + vocab, size=n).tolist()
        pairs.append((src, src[::-1] + [EOS_ID]))
    return pairs


pairs = reversal_corpus(10, seed=1)

for lr in (0.002, 0.01, 0.03):
    config = ModelConfig(
        vocab_size=24, hidden_size=32, embedding_size=16,
        encoder_layers=2, decoder_layers=2, attention_hidden=16,
    )
    tc = TrainConfig(total_steps=150, seed=5, batch_size=10, adam_steps=150,
                     adam_lr=lr, dropout_prob=0.0)
    params = init_params(config, seed=3)
    state = OptimizerState()
    rng = np.random.default_rng(0)
    losses = []
    for step in range(150):
        stats = train_step(state, pairs, params, config, tc, rng)
        losses.append(stats["loss"])
    print(f"lr={lr}: loss[0]={losses[0]:.3f} loss[50]={losses[50]:.3f} "
          f"loss[100]={losses[100]:.3f} loss[149]={losses[-1]:.3f} "
          f"monotone100={all(a >= b for a, b in zip(losses[:100], losses[1:101]))}")
