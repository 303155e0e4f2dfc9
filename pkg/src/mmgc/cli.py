"""Command-line entry point: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

from . import data as D
from .checkpoint import Checkpoint
from .config import VARIANTS, RunConfig
from .errors import (ConfigError, ConfigMismatch, DataIOError, EmptyCorpus, FormatError, InvalidParams,
                     NumericError)
from .gradcheck import TOLERANCE, run_gradcheck
from .report_encoder import build_vocab
from .train import METRIC_NAMES, evaluate, run_ablation, train

log = logging.getLogger("mmgc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False)


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())


def _load_config(args, overrides: dict) -> RunConfig:
    cfg = RunConfig.load(args.config).update(overrides)
    return cfg.validate()


def gen_params(cfg: RunConfig) -> D.GenParams:
    g = cfg.gen
    return D.GenParams(n_samples=g.n, prior_gc=g.prior, a_img=g.a_img, a_txt=g.a_txt, sigma=g.sigma,
                       seed=g.data_seed, image_size=cfg.model.image_size, channels=cfg.model.channels)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, {"n": args.n, "a_img": args.a_img, "a_txt": args.a_txt, "sigma": args.sigma,
                              "data_seed": args.seed, "split_seed": args.split_seed, "prior": args.prior})
    params = gen_params(cfg).validate()
    if params.n_samples < 10:
        raise D.TooFewSamples(f"need at least 10 samples, got {params.n_samples}")
    samples = D.generate(params)
    parts = D.split([s.id for s in samples], cfg.gen.split_seed, strata=D.split_strata(samples))
    vocab = build_vocab([s.report for s in samples])
    out = Path(args.out)
    D.save_dataset(samples, parts, out, vocab)
    _write_config(cfg, out)
    try:
        bayes = {m: D.bayes_accuracy(params, m) for m in ("image", "text", "fused")}
    except InvalidParams:
        bayes = None
    summary = {
        "n": params.n_samples,
        "split": {p: len(parts.part(p)) for p in ("train", "val", "test")},
        "vocab_size": len(vocab),
        "bayes_accuracy": bayes,
    }
    print(_dump(summary))
    return EXIT_OK


def _load_training_data(data_dir: str, max_len: int):
    samples, parts = D.load_dataset(data_dir)
    vocab = D.load_vocab(data_dir, samples)
    arrays = {p: D.to_arrays(D.select(samples, parts.part(p)), vocab, max_len) for p in ("train", "val", "test")}
    return vocab, arrays


def _model_config(cfg: RunConfig, vocab, variant: str):
    return dataclasses.replace(cfg.model, vocab_size=len(vocab), variant=variant)


def cmd_train(args) -> int:
    cfg = _load_config(args, {"variant": args.variant, "seed": args.seed, "epochs": args.epochs,
                              "reference_lr": True if args.reference_lr else None})
    vocab, arrays = _load_training_data(args.data, cfg.model.max_len)
    model_cfg = _model_config(cfg, vocab, cfg.model.variant)
    init = Checkpoint.load(args.resume).tensors if args.resume else None
    result = train(model_cfg, cfg.train, arrays["train"], arrays["val"], cfg.seed, init_params=init)
    test = evaluate(result.model, arrays["test"], cfg.train.average, cfg.train.eval_batch_size)
    out = Path(args.out)
    _write_config(cfg, out)
    ckpt = Checkpoint.from_model(result.model, vocab, cfg.seed, result.best_epoch,
                                 vocab_path=str(Path(args.data) / "vocab.txt"))
    ckpt.save(out / "checkpoint.mmgc")
    metrics = {
        "variant": model_cfg.variant,
        "seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "history": result.history,
        "test": test.to_dict(),
    }
    (out / "metrics.json").write_text(_dump(metrics))
    print(_dump({"best_epoch": result.best_epoch, "test": test.to_dict()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    samples, parts = D.load_dataset(args.data)
    vocab = D.load_vocab(args.data, samples)
    if vocab.tokens != ckpt.vocab:
        raise ConfigMismatch("dataset vocabulary differs from the checkpoint's vocabulary")
    arrays = D.to_arrays(D.select(samples, parts.part(args.split)), vocab, ckpt.config.max_len)
    report = evaluate(ckpt.to_model(), arrays, args.average)
    print(_dump(report.to_dict()))
    return EXIT_OK


def ablation_rows(table) -> list[dict]:
    rows = []
    for variant, (summary, _) in table.items():
        row = {"variant": variant.upper()}
        for m in METRIC_NAMES:
            row[f"{m}_mean"] = summary.mean[m]
            row[f"{m}_std"] = summary.std[m]
        rows.append(row)
    return rows


def trial_rows(table) -> list[dict]:
    rows = []
    for variant, (summary, outcomes) in table.items():
        for o in outcomes:
            rows.append({"variant": variant.upper(), "trial": f"seed={o.seed}",
                         **{m: getattr(o.test, m) for m in METRIC_NAMES},
                         "recall_VCD": o.test.recall_per_class["VCD"], "recall_GC": o.test.recall_per_class["GC"]})
        for stat in ("mean", "std"):
            values = getattr(summary, stat)
            rows.append({"variant": variant.upper(), "trial": stat, **{k: values[k] for k in values}})
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\r\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = _load_config(args, {"trials": args.trials, "seed": args.seed, "epochs": args.epochs})
    vocab, arrays = _load_training_data(args.data, cfg.model.max_len)
    model_cfg = _model_config(cfg, vocab, cfg.model.variant)
    table = run_ablation(model_cfg, cfg.train, arrays["train"], arrays["val"], arrays["test"],
                         cfg.train.trials, cfg.seed, jobs=args.jobs)
    doc = {
        "rows": ablation_rows(table),
        "variants": {v.upper(): {"mean": s.mean, "std": s.std,
                                 "trials": [{"seed": o.seed, "best_epoch": o.best_epoch, "test": o.test.to_dict()}
                                            for o in runs]}
                     for v, (s, runs) in table.items()},
    }
    if args.out:
        out = Path(args.out)
        _write_config(cfg, out)
        (out / "ablation.json").write_text(_dump(doc))
        (out / "ablation.csv").write_text(to_csv(ablation_rows(table)))
        (out / "trials.csv").write_text(to_csv(trial_rows(table)))
    print(_dump(doc))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(seed=args.seed)
    if args.json:
        print(_dump([dataclasses.asdict(r) | {"passed": r.passed} for r in rows]))
    else:
        print(f"{'component':<20} {'max_rel_error':>14}  status")
        for r in rows:
            status = "ok" if r.passed else f"FAIL{' (' + r.error + ')' if r.error else ''}"
            print(f"{r.component:<20} {r.max_rel_error:>14.3e}  {status}")
    failing = [r.component for r in rows if not r.passed]
    if failing:
        print(f"gradcheck failed (tolerance {TOLERANCE:g}): {', '.join(failing)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmgc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--a-img", type=float)
    p.add_argument("--a-txt", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--prior", type=float, help="class prior p(GC)")
    p.add_argument("--seed", type=int, help="generation seed")
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--reference-lr", action="store_true", help="pin the peak learning rate to 1e-5")
    p.add_argument("--resume", help="initialize parameters from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split part")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--average", choices=("macro", "micro", "weighted"), default="macro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="m1/m2/m3 ablation over several trials")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of every component")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidParams, DataIOError, FormatError, ConfigMismatch, EmptyCorpus, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
