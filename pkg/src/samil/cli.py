"""Command-line entry point: ``samil <command> [options]``.

Every command accepts ``--config run.json`` (an ExperimentConfig as JSON)
and repeated ``--set key=value`` overrides, where the value is parsed as
JSON when possible (``--set epochs=50 --set hidden=[64,32]``).
Errors print one diagnostic line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from samil.errors import SamilError
from samil.harness.config import ExperimentConfig
from samil.harness.pipeline import (
    audit_csv,
    curve_csv,
    load_model,
    load_or_generate,
    metrics_csv,
    run_pipeline,
    run_pretraining,
    run_training,
    sweep,
    sweep_csv,
)
from samil.harness.training import StudyCache, evaluate, metrics_report
from samil.synthdata import GeneratorConfig, generate_dataset, load_dataset, save_dataset


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SamilError(f"--set expects key=value, got {item!r}")
        target = base
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = _value(value)
    if getattr(args, "dataset", None):
        base["dataset"] = args.dataset
    cfg = ExperimentConfig.from_dict(base)
    return cfg.validate()


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_gen_data(args):
    cfg = load_config(args)
    gen = GeneratorConfig.from_dict(cfg.generator)
    bundle = generate_dataset(gen)
    save_dataset(bundle, args.out)
    print(f"wrote {args.out} (fingerprint {bundle.fingerprint})")


def cmd_pretrain(args):
    cfg = load_config(args)
    if cfg.pretrain == "none":
        cfg.pretrain = "bag-cl"
    result, blob = run_pretraining(cfg, load_or_generate(cfg))
    Path(args.out).write_bytes(blob)
    print(f"wrote {args.out} (best kNN {result.best_probe:.4f} at epoch {result.best_epoch})")


def cmd_train(args):
    cfg = load_config(args)
    if args.run_dir:
        cfg.run_dir = args.run_dir
    if cfg.run_dir:
        manifest = run_pipeline(cfg)
        print(f"wrote {cfg.run_dir} (best validation balanced accuracy {manifest['best_val_balanced_accuracy']:.4f})")
        return
    outcome = run_training(cfg)
    sys.stdout.write(metrics_csv(outcome.report))


def _evaluation(args):
    model = load_model(args.checkpoint)
    bundle = load_dataset(args.dataset)
    studies = bundle.split(args.split)
    return evaluate(model, StudyCache(studies, model.dtype)), studies


def cmd_eval(args):
    ev, _ = _evaluation(args)
    report = metrics_report(ev)
    _write(args.out, metrics_csv(report))
    if args.curve:
        _write(args.curve, curve_csv(report))


def cmd_audit(args):
    ev, studies = _evaluation(args)
    _write(args.out, audit_csv(ev, studies))


def cmd_sweep(args):
    cfg = load_config(args)
    _write(args.out, sweep_csv(sweep(cfg)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, dataset=True):
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration field")
        if dataset:
            p.add_argument("--dataset", help="dataset file (generated from the config when omitted)")
        return p

    p = with_config(sub.add_parser("gen-data", help="generate a synthetic dataset file"), dataset=False)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = with_config(sub.add_parser("pretrain", help="Stage-1 contrastive pretraining"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(fn=cmd_pretrain)

    p = with_config(sub.add_parser("train", help="fine-tune (and pretrain when configured) a model"))
    p.add_argument("--run-dir", help="write the full set of run artifacts here")
    p.set_defaults(fn=cmd_train)

    for name, fn, help_text in (("eval", cmd_eval, "metrics of a checkpoint on a split"),
                                ("audit", cmd_audit, "per-instance attention audit")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--out", help="CSV path (stdout when omitted)")
        if name == "eval":
            p.add_argument("--curve", help="also write the attention-relevance curve CSV here")
        p.set_defaults(fn=fn)

    p = with_config(sub.add_parser("sweep", help="grid over lambda_sa x tau_v"))
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (SamilError, ValueError, OSError, KeyError) as exc:
        print(f"samil {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
