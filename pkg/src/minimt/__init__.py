"""
minimt: a desk-scale neural machine translation pipeline.

Wordpiece segmentation, a deep residual-LSTM encoder-decoder with attention,
likelihood plus reward-refined training, simulated 8-bit inference, and a
beam-search decoder with length normalization and a coverage penalty.
"""

from .decode import (
    Hypothesis,
    ScoreParams,
    batch_decode,
    beam_search,
    coverage_penalty,
    greedy_decode,
    length_penalty,
    score,
    unk_replace,
)
from .metrics import corpus_bleu, gleu
from .model import (
    DecodeSession,
    FloatModel,
    ModelConfig,
    ModelParams,
    forward_backward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sequence_log_prob,
)
from .quantize import (
    FixedVec16,
    QuantizedMatrix,
    QuantizedModel,
    load_quantized_checkpoint,
    parity_report,
    quantize_weights,
    quantized_logits,
    quantized_matmul,
    save_quantized_checkpoint,
)
from .segmentation import (
    MixedVocabConfig,
    WordpieceVocab,
    WordVocabConfig,
    decode_mixed,
    detokenize,
    encode_mixed,
    encode_word_unk,
    load_vocab,
    save_vocab,
    segment,
    train_wordpiece,
)
from .training import (
    OptimizerState,
    TrainConfig,
    ml_loss,
    mixed_loss,
    refine_with_rl,
    rl_loss,
    run_training,
    sample_sequences,
    train_step,
)

__version__ = "0.1.0"
