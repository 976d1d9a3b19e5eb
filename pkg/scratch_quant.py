"""Scratch: float vs quantized path agreement on a random clip-mode model."""
import numpy as np

from minimt.model import ModelConfig, init_params, FloatModel
from minimt.quantize import QuantizedModel, corpus_log_perplexity
from minimt.decode import greedy_decode
from minimt.segmentation import EOS_ID

config = ModelConfig(
    vocab_size=16, hidden_size=16, embedding_size=8,
    encoder_layers=3, decoder_layers=3, residual_start_layer=3,
    attention_hidden=8, accumulator_clip=1.0,
).validate()
params = init_params(config, seed=3)
for k in params.tensors:
    params.tensors[k] = params.tensors[k] * 8.0  # give the model some signal

fmodel = FloatModel(params, config)
qmodel = QuantizedModel.from_params(params, config)

rng = np.random.default_rng(0)
pairs = []
for _ in range(20):
    src = rng.integers(4, 16, size=rng.integers(3, 7)).tolist()
    tgt = rng.integers(4, 16, size=rng.integers(3, 7)).tolist() + [EOS_ID]
    pairs.append((src, tgt))

f_ppl = corpus_log_perplexity(fmodel, pairs)
q_ppl = corpus_log_perplexity(qmodel, pairs)
print("float log-ppl:", f_ppl)
print("quant log-ppl:", q_ppl, "rel delta:", abs(q_ppl - f_ppl) / f_ppl)

agree = 0
for src, _ in pairs:
    a = greedy_decode(src, fmodel)
    b = greedy_decode(src, qmodel)
    agree += a == b
print("greedy agreement:", agree, "/", len(pairs))

# determinism of the quantized path
q2 = corpus_log_perplexity(QuantizedModel.from_params(params, config), pairs)
print("bit deterministic:", q2 == q_ppl)
