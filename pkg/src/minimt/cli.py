"""
Command-line surface tying the pipeline together.

Subcommands:
    wordpiece-train   induce a wordpiece vocabulary from a corpus
    encode            segment text with a trained vocabulary
    train             likelihood training (Adam then SGD) from a config file
    refine-rl         mixed-objective refinement of a trained checkpoint
    translate         beam-search decoding to stdout (optionally quantized)
    evaluate          BLEU / GLEU / log-perplexity on an aligned corpus
    quantize          convert a float checkpoint to the int8 format
    gradcheck         finite-difference verification of the backward passes

Configuration files are INI-style text with [model], [train], [score],
[paths], and [run] sections; see the README for a worked example. Results
go to stdout, diagnostics to stderr; the exit code is 0 only when the
command's contract was met.
"""

import argparse
import configparser
import shutil
import sys
from pathlib import Path

import numpy as np

from . import decode, gradcheck, metrics, quantize, segmentation, training
from .errors import ConfigError, DecodeError, FormatError, ShapeError, UsageError
from .model import (
    FloatModel,
    KIND_FLOAT,
    KIND_QUANTIZED,
    ModelConfig,
    init_params,
    load_checkpoint,
    read_container,
    save_checkpoint,
)
from .segmentation import EOS_ID

_ERRORS = (ConfigError, DecodeError, FormatError, ShapeError, UsageError, OSError)


# -----------------------------------------------------------------------------
# Config and corpus ingestion
# -----------------------------------------------------------------------------

_MODEL_KEYS = {
    "hidden_size": int, "embedding_size": int, "encoder_layers": int,
    "decoder_layers": int, "residual_start_layer": int, "attention_hidden": int,
    "logit_clip": float, "vocab_size": int,
}
_TRAIN_KEYS = {
    "total_steps": int, "batch_size": int, "adam_steps": int, "adam_lr": float,
    "sgd_lr": float, "anneal_start": int, "anneal_interval": int,
    "anneal_factor": float, "grad_norm_cap": float, "dropout_prob": float,
    "mix_alpha": float, "rl_samples": int, "rl_lr": float, "delta_start": float,
    "delta_end": float, "eval_interval": int, "patience": int,
    "checkpoint_interval": int,
}
_SCORE_KEYS = {
    "lp_alpha": float, "cp_beta": float, "beam_width": int,
    "prune_margin": float, "max_len_factor": float,
}


def _section(parser: configparser.ConfigParser, name: str, keys: dict) -> dict:
    values = {}
    if parser.has_section(name):
        for key, raw in parser.items(name):
            if key not in keys:
                raise ConfigError(f"unknown key '{key}' in [{name}]")
            values[key] = None if raw.strip().lower() == "none" else keys[key](raw)
    return values


class RunConfig:
    """Everything a run needs: model and training knobs, score parameters,
    corpus/vocab/run-directory paths, the seed, and the mode flags."""

    def __init__(self, path):
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        self.path = Path(path)
        self.model_kwargs = _section(parser, "model", _MODEL_KEYS)
        self.train_kwargs = _section(parser, "train", _TRAIN_KEYS)
        self.score_kwargs = _section(parser, "score", _SCORE_KEYS)
        self.paths = dict(parser.items("paths")) if parser.has_section("paths") else {}
        run = dict(parser.items("run")) if parser.has_section("run") else {}
        self.seed = int(run["seed"]) if "seed" in run else None
        self.quantization_aware = run.get("quantization_aware", "false").lower() in ("1", "true", "yes")

    def path_of(self, key: str, required=True) -> Path:
        if key not in self.paths:
            if required:
                raise ConfigError(f"config is missing paths.{key}")
            return None
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.path.parent / p

    def model_config(self, vocab_size: int) -> ModelConfig:
        kwargs = dict(self.model_kwargs)
        declared = kwargs.pop("vocab_size", None)
        if declared is not None and declared != vocab_size:
            raise ConfigError(
                f"config says vocab_size={declared} but the vocabulary has {vocab_size} entries"
            )
        return ModelConfig(vocab_size=vocab_size, **kwargs).validate()

    def train_config(self, seed: int) -> training.TrainConfig:
        return training.TrainConfig(
            seed=seed, quantization_aware=self.quantization_aware, **self.train_kwargs
        ).validate()

    def score_params(self) -> decode.ScoreParams:
        return decode.ScoreParams(**self.score_kwargs).validate()


def load_parallel_corpus(source_path, target_path):
    """Line-aligned sentence pairs; mismatched counts or empty lines fail."""
    with open(source_path, encoding="utf-8") as fh:
        src_lines = fh.read().splitlines()
    with open(target_path, encoding="utf-8") as fh:
        tgt_lines = fh.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ConfigError(
            f"corpus is misaligned: {len(src_lines)} source vs {len(tgt_lines)} target lines"
        )
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        if not s.strip() or not t.strip():
            raise ConfigError(f"corpus line {i} is empty")
    return list(zip(src_lines, tgt_lines))


def corpus_to_ids(pairs, vocab):
    """Segment both sides; targets get the EOS id appended."""
    out = []
    for src, tgt in pairs:
        out.append((segmentation.segment(src, vocab), segmentation.segment(tgt, vocab) + [EOS_ID]))
    return out


def _read_input_lines(path):
    if path is None or path == "-":
        return [line.rstrip("\n") for line in sys.stdin]
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _score_params_from_args(args) -> decode.ScoreParams:
    params = decode.ScoreParams()
    if args.beam is not None:
        params.beam_width = args.beam
    if args.lp_alpha is not None:
        params.lp_alpha = args.lp_alpha
    if args.cp_beta is not None:
        params.cp_beta = args.cp_beta
    if args.prune_margin is not None:
        params.prune_margin = None if args.prune_margin <= 0 else args.prune_margin
    return params.validate()


def _warn_config_override(args, checkpoint_config):
    if getattr(args, "config", None) is None:
        return
    run = RunConfig(args.config)
    for key, value in run.model_kwargs.items():
        if key == "vocab_size":
            continue
        if getattr(checkpoint_config, key) != value:
            print(
                f"warning: checkpoint config overrides {key}={value} from {args.config}",
                file=sys.stderr,
            )


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_wordpiece_train(args) -> int:
    with open(args.corpus, encoding="utf-8") as fh:
        corpus = [line for line in fh.read().splitlines() if line.strip()]
    vocab = segmentation.train_wordpiece(corpus, args.desired_tokens, char_cap=args.char_cap)
    segmentation.save_vocab(vocab, args.out)
    print(f"wrote {vocab.piece_count} pieces (+4 reserved) to {args.out}")
    return 0


def cmd_encode(args) -> int:
    vocab = segmentation.load_vocab(args.vocab)
    for line in _read_input_lines(args.input):
        if args.ids:
            print(" ".join(str(i) for i in segmentation.segment(line, vocab)))
        else:
            print(" ".join(segmentation.segment_pieces(line, vocab)))
    return 0


def _rotate_checkpoints(run_dir: Path, keep: int = 3):
    numbered = sorted(run_dir.glob("step_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    for old in numbered[:-keep]:
        old.unlink()


def cmd_train(args) -> int:
    run = RunConfig(args.config)
    seed = args.seed if args.seed is not None else run.seed
    if seed is None:
        raise ConfigError("training needs a seed (run.seed or --seed)")

    vocab = segmentation.load_vocab(run.path_of("vocab"))
    pairs = corpus_to_ids(
        load_parallel_corpus(run.path_of("train_source"), run.path_of("train_target")), vocab
    )
    dev_path = run.path_of("dev_source", required=False)
    dev_pairs = []
    if dev_path is not None:
        dev_pairs = corpus_to_ids(
            load_parallel_corpus(dev_path, run.path_of("dev_target")), vocab
        )

    model_config = run.model_config(len(vocab))
    train_config = run.train_config(seed)
    if train_config.quantization_aware:
        model_config.accumulator_clip = train_config.delta_end

    run_dir = run.path_of("run_dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(run.path, run_dir / "config.effective.ini")

    state = None
    if args.resume:
        params, _ = load_checkpoint(run_dir / "last.ckpt")
        state = training.load_train_state(run_dir / "train_state.ckpt", model_config)
        print(f"resuming from step {state.step}", file=sys.stderr)
    else:
        params = init_params(model_config, seed)

    log_path = run_dir / "train.log"
    with open(log_path, "a", encoding="utf-8") as log:

        def log_fn(line):
            log.write(line + "\n")

        def checkpoint_fn(step, current):
            save_checkpoint(current, model_config, run_dir / f"step_{step}.ckpt")
            _rotate_checkpoints(run_dir)

        best, state, _ = training.run_training(
            pairs, dev_pairs, params, model_config, train_config,
            log_fn=log_fn, checkpoint_fn=checkpoint_fn, state=state,
        )
    save_checkpoint(params, model_config, run_dir / "last.ckpt")
    save_checkpoint(best, model_config, run_dir / "best.ckpt")
    training.save_train_state(state, model_config, run_dir / "train_state.ckpt")
    print(f"finished {state.step} steps; checkpoints in {run_dir}")
    return 0


def cmd_refine_rl(args) -> int:
    run = RunConfig(args.config)
    seed = args.seed if args.seed is not None else run.seed
    if seed is None:
        raise ConfigError("refinement needs a seed (run.seed or --seed)")
    vocab = segmentation.load_vocab(run.path_of("vocab"))
    pairs = corpus_to_ids(
        load_parallel_corpus(run.path_of("train_source"), run.path_of("train_target")), vocab
    )
    dev_pairs = corpus_to_ids(
        load_parallel_corpus(run.path_of("dev_source"), run.path_of("dev_target")), vocab
    )
    params, model_config = load_checkpoint(args.checkpoint)
    train_config = run.train_config(seed)
    refined = training.refine_with_rl(
        params, pairs, dev_pairs, model_config, train_config,
        log_fn=lambda line: print(line, file=sys.stderr),
    )
    save_checkpoint(refined, model_config, args.out)
    print(f"wrote refined checkpoint to {args.out}")
    return 0


def _load_model_for_decoding(args):
    kind, _, _ = read_container(args.checkpoint)
    if kind == KIND_QUANTIZED:
        qmodel = quantize.load_quantized_checkpoint(args.checkpoint)
        if not args.quantized:
            raise ConfigError("checkpoint is quantized; pass --quantized to decode with it")
        _warn_config_override(args, qmodel.config)
        return qmodel, qmodel.config
    params, config = load_checkpoint(args.checkpoint)
    _warn_config_override(args, config)
    if args.quantized:
        model = quantize.QuantizedModel.from_params(params, config)
        return model, config
    return FloatModel(params, config), config


def cmd_translate(args) -> int:
    vocab = segmentation.load_vocab(args.vocab)
    model, config = _load_model_for_decoding(args)
    if len(vocab) != config.vocab_size:
        raise ConfigError(
            f"vocabulary size {len(vocab)} does not match checkpoint ({config.vocab_size})"
        )
    params = _score_params_from_args(args)
    lines = _read_input_lines(args.input)
    sources = [segmentation.segment(line, vocab) for line in lines]
    best = decode.batch_decode(sources, model, params, batch_cap=args.batch_cap)
    for hyp in best:
        tokens = [t for t in hyp.tokens if t != EOS_ID]
        print(segmentation.detokenize(tokens, vocab))
    return 0


def cmd_evaluate(args) -> int:
    vocab = segmentation.load_vocab(args.vocab)
    params, config = load_checkpoint(args.checkpoint)
    _warn_config_override(args, config)
    pairs = corpus_to_ids(load_parallel_corpus(args.source, args.reference), vocab)
    model = FloatModel(params, config)

    score_params = _score_params_from_args(args)
    sources = [s for s, _ in pairs]
    refs = [t[:-1] for _, t in pairs]
    best = decode.batch_decode(sources, model, score_params)
    hyps = [[t for t in h.tokens if t != EOS_ID] for h in best]
    records = [
        ("bleu", metrics.corpus_bleu(hyps, refs)),
        ("gleu", float(np.mean([metrics.gleu(h, r) for h, r in zip(hyps, refs)]))),
        ("log_perplexity", quantize.corpus_log_perplexity(model, pairs)),
    ]
    if args.parity:
        report = quantize.parity_report(params, config, pairs)
        records += [
            ("float_log_perplexity", report["float"]["log_perplexity"]),
            ("float_greedy_bleu", report["float"]["bleu"]),
            ("quantized_log_perplexity", report["quantized"]["log_perplexity"]),
            ("quantized_greedy_bleu", report["quantized"]["bleu"]),
            ("greedy_agreement", report["greedy_agreement"]),
        ]
    for key, value in records:
        print(f"{key}\t{value:.6f}")
    return 0


def cmd_quantize(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    qmodel = quantize.QuantizedModel.from_params(params, config)
    quantize.save_quantized_checkpoint(qmodel, args.out)
    print(f"wrote quantized checkpoint (delta={qmodel.delta}, gamma={qmodel.gamma}) to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradient_checks(
        seed=args.seed if args.seed is not None else 0,
        cases=args.cases,
        components_per_tensor=args.components,
    )
    for key, value in report.items():
        if key in ("passed", "max"):
            continue
        print(f"{key}\tmax_rel_error={value:.3e}")
    print(f"overall\tmax_rel_error={report['max']:.3e}\t{'PASS' if report['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 1


# -----------------------------------------------------------------------------
# Argument parsing
# -----------------------------------------------------------------------------


def _add_score_flags(sub):
    sub.add_argument("--beam", type=int, default=None, help="beam width")
    sub.add_argument("--lp-alpha", type=float, default=None, dest="lp_alpha")
    sub.add_argument("--cp-beta", type=float, default=None, dest="cp_beta")
    sub.add_argument("--prune-margin", type=float, default=None, dest="prune_margin",
                     help="pruning margin in log units; <= 0 disables pruning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minimt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("wordpiece-train", help="induce a wordpiece vocabulary")
    p.add_argument("corpus")
    p.add_argument("--desired-tokens", type=int, required=True, dest="desired_tokens")
    p.add_argument("--char-cap", type=int, default=500, dest="char_cap")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_wordpiece_train)

    p = sub.add_parser("encode", help="segment text with a vocabulary")
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", default=None, help="file, or - / omitted for stdin")
    p.add_argument("--ids", action="store_true", help="emit token ids instead of pieces")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("train", help="likelihood training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("refine-rl", help="mixed-objective refinement")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_refine_rl)

    p = sub.add_parser("translate", help="beam-search decoding to stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--quantized", action="store_true")
    p.add_argument("--batch-cap", type=int, default=35, dest="batch_cap")
    _add_score_flags(p)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU / GLEU / log-perplexity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--parity", action="store_true",
                   help="add float vs quantized comparison columns")
    _add_score_flags(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("quantize", help="convert a checkpoint to int8")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cases", type=int, default=3)
    p.add_argument("--components", type=int, default=None,
                   help="probe only this many entries per tensor (default: all)")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
