"""End-to-end runs: data, optional Stage-1 pretraining, fine-tuning, evaluation and audit.

Everything a run produces goes under one run directory::

    config.json        the resolved configuration
    pretrain.ckpt      Stage-1 encoder and pooling weights (bag-cl / img-cl only)
    model.ckpt         best-validation Stage-2 weights
    metrics.csv        metric,value rows for the test split
    curve.csv          rank,mean_relevance (attention audit curve)
    audit.csv          one row per test instance with a_k, b_k, c_k and oracle relevance
    history.csv        per-epoch loss and validation balanced accuracy
    manifest.json      fingerprints tying the files together
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from samil.diffcore.checkpoint import dumps, load_checkpoint
from samil.diffcore.optim import ParameterSet
from samil.errors import ConfigurationError
from samil.harness.config import ExperimentConfig
from samil.harness.training import (
    Evaluation,
    MetricsReport,
    StudyCache,
    TrainResult,
    build_model,
    check_split,
    evaluate,
    fit,
    metrics_report,
)
from samil.milmodel import MILModel, ModelConfig
from samil.pretrain import PretrainResult, pretrain_bag_cl, pretrain_img_cl
from samil.synthdata import DatasetBundle, GeneratorConfig, generate_dataset, load_dataset

log = logging.getLogger(__name__)


def sha16(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def load_or_generate(config: ExperimentConfig) -> DatasetBundle:
    """Load ``config.dataset`` if set, otherwise generate from ``config.generator``."""
    if config.dataset:
        path = Path(config.dataset)
        if not path.exists():
            raise ConfigurationError(f"dataset file {path} does not exist")
        return load_dataset(path)
    return generate_dataset(GeneratorConfig.from_dict(config.generator))


def input_dim(bundle: DatasetBundle) -> int:
    return int(np.prod(bundle.train[0].instances.shape[1:]))


# ---------------------------------------------------------------- Stage 1


def run_pretraining(config: ExperimentConfig, bundle: DatasetBundle) -> tuple[PretrainResult, bytes]:
    """Stage-1 contrastive pretraining on train + unlabeled studies; returns (result, checkpoint bytes)."""
    if config.pretrain == "none":
        raise ConfigurationError("run_pretraining called with pretrain='none'")
    mcfg = config.model_config(input_dim(bundle))
    pool = list(bundle.train) + list(bundle.pretrain)
    labels = lambda studies: np.array([s.label for s in studies])  # noqa: E731
    probe_sets = ((bundle.train, labels(bundle.train)), (bundle.val, labels(bundle.val)))
    fn = pretrain_bag_cl if config.pretrain == "bag-cl" else pretrain_img_cl
    result = fn(pool, config.pretraining, mcfg, probe_sets)
    meta = {
        "kind": "pretrain",
        "mode": config.pretrain,
        "dataset_fingerprint": bundle.fingerprint,
        "model": mcfg.to_dict(),
        "best_epoch": result.best_epoch,
        "best_knn": result.best_probe,
    }
    return result, dumps(result.backbone, None, meta)


# ---------------------------------------------------------------- Stage 2


@dataclass
class TrainingOutcome:
    result: TrainResult
    evaluation: Evaluation
    report: MetricsReport
    checkpoint: bytes
    warm_start_sha: str | None


def _warm_start(config: ExperimentConfig, bundle: DatasetBundle):
    if config.pretrain == "none":
        return None, None
    if not config.pretrain_checkpoint or not Path(config.pretrain_checkpoint).exists():
        raise ConfigurationError(
            f"pretrain={config.pretrain!r} needs an existing pretrain_checkpoint, got {config.pretrain_checkpoint!r}")
    blob = Path(config.pretrain_checkpoint).read_bytes()
    params, _, meta = load_checkpoint(config.pretrain_checkpoint)
    if meta.get("dataset_fingerprint") not in (None, bundle.fingerprint):
        log.warning("pretrain checkpoint was built from dataset %s, training on %s",
                    meta.get("dataset_fingerprint"), bundle.fingerprint)
    return params, sha16(blob)


def run_training(config: ExperimentConfig, bundle: DatasetBundle | None = None) -> TrainingOutcome:
    """Fine-tune on the training split, select on validation, report on test."""
    config.validate()
    bundle = bundle if bundle is not None else load_or_generate(config)
    dtype = np.dtype(config.dtype)
    train, val, test = (StudyCache(bundle.split(s), dtype) for s in ("train", "val", "test"))
    for cache, name in ((train, "train"), (val, "val"), (test, "test")):
        check_split(cache, name)
    warm, warm_sha = _warm_start(config, bundle)
    model = build_model(config, input_dim(bundle), warm)
    result = fit(config, train, val, model)
    ev = evaluate(result.model, test)
    report = metrics_report(ev)
    meta = {
        "kind": "model",
        "model": model.config.to_dict(),
        "dataset_fingerprint": bundle.fingerprint,
        "best_epoch": result.best_epoch,
        "best_val_balanced_accuracy": result.best_val_ba,
        "warm_start_sha": warm_sha,
    }
    blob = dumps(result.model.params.state_dict(), result.optimizer, meta)
    return TrainingOutcome(result, ev, report, blob, warm_sha)


def load_model(path) -> MILModel:
    params, _, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ConfigurationError(f"{path} is not a fine-tuned model checkpoint")
    mcfg = ModelConfig(**meta["model"])
    ps = ParameterSet({k: v.astype(mcfg.dtype) for k, v in params.items()})
    return MILModel(mcfg, ps)


# ---------------------------------------------------------------- CSV output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_csv(report: MetricsReport) -> str:
    return csv_text(("metric", "value"), report.rows())


def curve_csv(report: MetricsReport) -> str:
    return csv_text(("rank", "mean_relevance"), [(r + 1, v) for r, v in enumerate(report.attention_curve)])


def audit_csv(ev: Evaluation, studies) -> str:
    """One row per instance: final attention, both branches and the oracle relevance."""
    rows = []
    for i, study in enumerate(studies):
        A = ev.supervised[i] if ev.supervised else ev.attentions[i]
        B = ev.flexible[i] if ev.flexible else np.full(study.size, np.nan)
        for k in range(study.size):
            rows.append((study.study_id, k, int(study.view_types[k]), study.label,
                         A[k], B[k], ev.attentions[i][k], ev.relevances[i][k]))
    header = ("study_id", "instance", "view_type", "label", "a", "b", "c", "oracle_relevance")
    return csv_text(header, rows)


def history_csv(result: TrainResult) -> str:
    return csv_text(("epoch", "loss", "val_balanced_accuracy"),
                    [(h["epoch"], h["loss"], h["val_ba"]) for h in result.history])


# ---------------------------------------------------------------- full pipeline


def run_pipeline(config: ExperimentConfig) -> dict:
    """Generate or load data, pretrain if asked, fine-tune, evaluate, audit; write the run directory."""
    config.validate()
    if not config.run_dir:
        raise ConfigurationError("run_pipeline needs run_dir")
    out = Path(config.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_or_generate(config)
    manifest = {"dataset_fingerprint": bundle.fingerprint, "pretrain": config.pretrain}

    if config.pretrain != "none":
        pre, blob = run_pretraining(config, bundle)
        path = out / "pretrain.ckpt"
        path.write_bytes(blob)
        manifest["pretrain_checkpoint"] = {"file": path.name, "sha": sha16(blob),
                                           "best_epoch": pre.best_epoch, "best_knn": pre.best_probe}
        config = ExperimentConfig.from_dict({**config.to_dict(), "pretrain_checkpoint": str(path)})

    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    outcome = run_training(config, bundle)
    files = {
        "model.ckpt": outcome.checkpoint,
        "metrics.csv": metrics_csv(outcome.report).encode(),
        "curve.csv": curve_csv(outcome.report).encode(),
        "audit.csv": audit_csv(outcome.evaluation, bundle.test).encode(),
        "history.csv": history_csv(outcome.result).encode(),
    }
    for name, blob in files.items():
        (out / name).write_bytes(blob)
    manifest["warm_start_sha"] = outcome.warm_start_sha
    manifest["best_epoch"] = outcome.result.best_epoch
    manifest["best_val_balanced_accuracy"] = outcome.result.best_val_ba
    manifest["files"] = {name: sha16(blob) for name, blob in files.items()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- sweeps and seeds


def aggregate(reports: list[MetricsReport], seeds) -> MetricsReport:
    """Mean over seeds, with each seed's headline numbers kept in ``per_seed``."""
    per_seed = [{"seed": s, "balanced_accuracy": r.balanced_accuracy, **r.aurocs} for s, r in zip(seeds, reports)]
    keys = reports[0].aurocs.keys()
    return MetricsReport(
        balanced_accuracy=float(np.mean([r.balanced_accuracy for r in reports])),
        aurocs={k: float(np.mean([r.aurocs[k] for r in reports])) for k in keys},
        confusion=np.sum([r.confusion for r in reports], axis=0),
        attention_curve=np.mean([r.attention_curve for r in reports], axis=0),
        per_seed=per_seed,
    )


def run_seeds(config: ExperimentConfig, seeds, bundle: DatasetBundle | None = None) -> tuple[MetricsReport, list]:
    bundle = bundle if bundle is not None else load_or_generate(config)
    outcomes = [run_training(ExperimentConfig.from_dict({**config.to_dict(), "seed": s}), bundle) for s in seeds]
    return aggregate([o.report for o in outcomes], seeds), outcomes


def sweep(config: ExperimentConfig, bundle: DatasetBundle | None = None) -> list[dict]:
    """Train once per (lambda_sa, tau_v) grid point; rows sorted as the grid, best marked by validation."""
    bundle = bundle if bundle is not None else load_or_generate(config)
    rows = []
    for lam in config.lambda_sa_grid:
        for tau in config.tau_v_grid:
            cfg = ExperimentConfig.from_dict({**config.to_dict(), "lambda_sa": lam, "tau_v": tau})
            o = run_training(cfg, bundle)
            rows.append({"lambda_sa": lam, "tau_v": tau, "val_balanced_accuracy": o.result.best_val_ba,
                         "test_balanced_accuracy": o.report.balanced_accuracy, "best_epoch": o.result.best_epoch})
    best = max(range(len(rows)), key=lambda i: (rows[i]["val_balanced_accuracy"], -i))
    for i, r in enumerate(rows):
        r["selected"] = int(i == best)
    return rows


def sweep_csv(rows) -> str:
    header = ("lambda_sa", "tau_v", "val_balanced_accuracy", "test_balanced_accuracy", "best_epoch", "selected")
    return csv_text(header, [[r[h] for h in header] for r in rows])
