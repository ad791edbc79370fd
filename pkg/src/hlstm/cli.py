"""Command-line entry points.

Every subcommand writes line-delimited JSON records to stdout (or ``--metrics``).
Exit codes: 0 success, 1 a check failed or training diverged, 2 bad configuration
or unreadable input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from fractions import Fraction

import numpy as np

from . import checkpoint, compare, gradcheck, seqtrain, synth, trainer
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .data import read_dataset
from .network import Model
from .tensor import RngStream, derive_seed

GRAD_TOLERANCE = 1e-4
CHUNK_TOLERANCE = 1e-10


class Metrics:
    def __init__(self, stream):
        self.stream = stream

    def __call__(self, record: dict) -> None:
        self.stream.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
        self.stream.flush()


def _jsonable(obj):
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (a --config file overrides these)")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")
    parser.add_argument("--config", help="INI file with a [run] section")
    parser.add_argument("--metrics", help="write metrics records here instead of stdout")


def _config(args) -> RunConfig:
    raw = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, **parse_overrides(raw))


def _split(data_dir, name):
    utts, header = read_dataset(os.path.join(data_dir, f"{name}.bin"))
    return utts, header


def _check_mode(model: Model, config: RunConfig) -> None:
    if model.spec.bidirectional != config.bidirectional:
        raise ConfigError(f"mode {config.mode!r} does not fit a {'bi' if model.spec.bidirectional else 'uni'}"
                          "directional checkpoint")


def _new_model(config: RunConfig, input_dim: int, n_classes: int) -> Model:
    spec = config.stack_spec(input_dim, n_classes)
    rng = RngStream(derive_seed(config.seed, trainer.INIT))
    return Model.init(spec, rng, config.init_scale, config.forget_bias, config.carry_bias)


def _load_or_init(args, config, input_dim, n_classes, blank=False):
    if getattr(args, "checkpoint", None):
        model, _ = checkpoint.load_model(args.checkpoint)
        _check_mode(model, config)
        return model
    if blank:
        # all-zero weights: uniform posteriors, chance-level tie-aware accuracy
        return Model.zeros(config.stack_spec(input_dim, n_classes))
    return _new_model(config, input_dim, n_classes)


def cmd_synth(args, config, emit):
    paths = synth.synth(config, args.out, config.seed)
    emit({"event": "synth", "seed": config.seed, "files": {k: os.path.basename(v) for k, v in paths.items()}})
    return 0


def cmd_train(args, config, emit):
    train_utts, header = _split(args.data, "train")
    valid_utts = []
    if os.path.exists(os.path.join(args.data, "valid.bin")):
        valid_utts, _ = _split(args.data, "valid")
    model = _load_or_init(args, config, header["feature_dim"], header["n_classes"])
    result = trainer.train(model, train_utts, valid_utts, config, emit=lambda r: emit(dict(r, event="epoch")))
    if os.path.exists(os.path.join(args.data, "test.bin")):
        test_utts, _ = _split(args.data, "test")
        emit(dict(trainer.evaluate(result.model, test_utts, config), event="eval", split="test"))
    if args.out:
        checkpoint.save_model(args.out, result.model, {"config": config.to_dict(), "stage": "cross-entropy"})
        emit({"event": "checkpoint", "checksum": result.model.checksum()})
    return 0


def cmd_seqtrain(args, config, emit):
    model, _ = checkpoint.load_model(args.checkpoint)
    _check_mode(model, config)
    train_utts, _ = _split(args.data, "train")
    graph = seqtrain.read_graph(args.graph or os.path.join(args.data, "graph.txt"))
    before = seqtrain.mean_expected_accuracy(model, train_utts, graph, config)
    emit({"event": "expected_accuracy", "when": "before", "value": before})
    for epoch in range(config.seq_epochs):
        _, acc = seqtrain.train_sequence_epoch(
            model, train_utts, graph, config, epoch, on_cycle=lambda r: emit(dict(r, event="cycle")))
        emit({"event": "seq_epoch", "epoch": epoch, "pooled_expected_accuracy": acc})
    after = seqtrain.mean_expected_accuracy(model, train_utts, graph, config)
    emit({"event": "expected_accuracy", "when": "after", "value": after})
    if args.out:
        checkpoint.save_model(args.out, model, {"config": config.to_dict(), "stage": "sequence"})
        emit({"event": "checkpoint", "checksum": model.checksum()})
    return 0


def cmd_eval(args, config, emit):
    utts, header = _split(args.data, args.split)
    model = _load_or_init(args, config, header["feature_dim"], header["n_classes"], blank=True)
    emit(dict(trainer.evaluate(model, utts, config), event="eval", split=args.split))
    return 0


def cmd_gradcheck(args, config, emit):
    worst = 0.0
    for res in gradcheck.run_suite(seed=config.seed):
        emit({"event": "gradcheck", **dataclasses.asdict(res)})
        worst = max(worst, res.max_rel_error)
    ok = worst <= GRAD_TOLERANCE
    emit({"event": "gradcheck_summary", "max_rel_error": worst, "tolerance": GRAD_TOLERANCE, "ok": ok})
    return 0 if ok else 1


def cmd_chunkcmp(args, config, emit):
    if args.data:
        utts, header = _split(args.data, args.split)
        input_dim, n_classes = header["feature_dim"], header["n_classes"]
    else:
        utts = synth.generate(config.replace(n_train=0, n_valid=0, n_test=args.n_utterances))["test"]
        input_dim, n_classes = config.feature_dim, config.alphabet
    model = _load_or_init(args, config, input_dim, n_classes)
    n_c = config.n_c if model.spec.bidirectional else config.segment_len
    n_r = config.n_r if model.spec.bidirectional else 0
    div = compare.chunk_divergence(model, utts, n_c, n_r, config.n_l)
    macs = compare.count_chunk_macs(model, config.n_l, config.n_c, config.n_r)
    ratio_ok = macs["saving"] == macs["formula"]
    div_ok = div["lc_full_lookahead"] <= CHUNK_TOLERANCE
    if not model.spec.bidirectional:
        div_ok = div_ok and div["lc"] <= CHUNK_TOLERANCE
    emit({"event": "chunkcmp", "bidirectional": model.spec.bidirectional, "n_c": n_c, "n_r": n_r,
          "n_l": config.n_l, "divergence": div, **macs, "saving_float": float(macs["saving"]),
          "ratio_ok": ratio_ok, "divergence_ok": div_ok})
    return 0 if (ratio_ok and div_ok) else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "seqtrain": cmd_seqtrain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "chunkcmp": cmd_chunkcmp,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hlstm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p = sub.add_parser("train", help="frame-level cross-entropy training")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--checkpoint", help="start from this checkpoint")
    p = sub.add_parser("seqtrain", help="two-pass sMBR sequence training")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph")
    p.add_argument("--out")
    p = sub.add_parser("eval", help="frame accuracy and cross-entropy")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p = sub.add_parser("chunkcmp", help="chunked vs full evaluation and counted compute")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--n-utterances", type=int, default=5)
    for p in sub.choices.values():
        _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = open(args.metrics, "w") if args.metrics else sys.stdout
    emit = Metrics(out)
    try:
        config = _config(args)
        return COMMANDS[args.command](args, config, emit)
    except (ConfigError, ValueError, OSError) as exc:
        emit({"event": "error", "kind": type(exc).__name__, "message": str(exc)})
        return 2
    except (trainer.TrainingDiverged, seqtrain.ReplayDivergence) as exc:
        emit({"event": "error", "kind": type(exc).__name__, "message": str(exc)})
        return 1
    finally:
        if out is not sys.stdout:
            out.close()


if __name__ == "__main__":
    sys.exit(main())
