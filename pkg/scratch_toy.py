"""Scratch: tune the toy reversal task (vocab 20, lengths 3-8, 2000 pairs)."""
import time

import numpy as np

from minimt.model import ModelConfig, init_params
from minimt.training import TrainConfig, run_training, evaluate_bleu
from minimt.segmentation import EOS_ID


def reversal_corpus(n_pairs, seed, lengths=(3, 8), vocab=20):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lengths[0], lengths[1] + 1))
        src = rng.integers(4, 4 + vocab, size=n).tolist()
        pairs.append((src, src[::-1] + [EOS_ID]))
    return pairs


train_pairs = reversal_corpus(2000, seed=11)
dev_pairs = reversal_corpus(200, seed=12)

config = ModelConfig(
    vocab_size=24, hidden_size=64, embedding_size=32,
    encoder_layers=2, decoder_layers=2, residual_start_layer=3,
    attention_hidden=32,
)
tc = TrainConfig(
    total_steps=700, seed=5, batch_size=48,
    adam_steps=350, adam_lr=0.002, sgd_lr=0.4,
    dropout_prob=0.0, quantization_aware=True,
    eval_interval=100,
)
config.accumulator_clip = tc.delta_end

params = init_params(config, seed=tc.seed)
t0 = time.time()
hist_losses = []


def log_fn(line):
    hist_losses.append(line)
    if line.startswith("#") or int(line.split("\t")[0]) % 50 == 0:
        print(f"[{time.time()-t0:6.1f}s] {line}")


best, state, history = run_training(train_pairs, dev_pairs, params, config, tc, log_fn=log_fn)
elapsed = time.time() - t0
bleu = evaluate_bleu(dev_pairs, best, config)
print(f"total {elapsed:.1f}s, final dev BLEU {bleu:.4f}")
print("final losses:", [f"{h['loss']:.4f}" for h in history[-5:]])
