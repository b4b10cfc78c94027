import json

import numpy as np
import pytest

from samil.diffcore.checkpoint import load_checkpoint
from samil.errors import ConfigurationError, DomainError
from samil.harness.config import ExperimentConfig, PretrainConfig
from samil.harness.pipeline import (
    aggregate,
    load_model,
    metrics_csv,
    run_pipeline,
    run_training,
    sweep,
    sweep_csv,
)
from samil.harness.training import StudyCache, check_split, evaluate
from samil.synthdata import GeneratorConfig, generate_dataset

SMALL_GEN = dict(n_train=24, n_val=12, n_test=12, n_pretrain=6, k_min=3, k_max=6, image_size=8, seed=1)


def small_config(**kw):
    base = dict(hidden=(16, 8), attention_dim=4, epochs=3, patience=3, batch_size=8, dtype="float64",
                generator=SMALL_GEN,
                pretraining=dict(epochs=1, queue_size=16, knn_k=3))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def bundle():
    return generate_dataset(GeneratorConfig(**SMALL_GEN))


def test_config_round_trip(tmp_path):
    cfg = small_config(lambda_sa=5.0)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = ExperimentConfig.from_file(path)
    assert again == cfg
    assert isinstance(again.pretraining, PretrainConfig)


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"pretraining": {"bogus": 1}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(variant="mean").validate()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(tau_v=0).validate()
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(bad)


def test_patience_zero_runs_one_epoch(bundle):
    out = run_training(small_config(patience=0), bundle)
    assert out.result.epochs_run == 1


def test_early_stopping_keeps_the_best_epoch(bundle):
    out = run_training(small_config(epochs=6, patience=2), bundle)
    vals = [h["val_ba"] for h in out.result.history]
    assert out.result.best_val_ba == max(vals)
    assert out.result.best_epoch == vals.index(max(vals))
    # the restored weights reproduce the recorded validation score
    val = StudyCache(bundle.val, np.float64)
    assert evaluate(out.result.model, val).balanced_accuracy() == out.result.best_val_ba


def test_training_is_deterministic(bundle):
    a = run_training(small_config(), bundle)
    b = run_training(small_config(), bundle)
    assert metrics_csv(a.report) == metrics_csv(b.report)
    assert a.checkpoint == b.checkpoint


def test_missing_pretrain_checkpoint(bundle, tmp_path):
    with pytest.raises(ConfigurationError):
        run_training(small_config(pretrain="bag-cl"), bundle)
    with pytest.raises(ConfigurationError):
        run_training(small_config(pretrain="bag-cl", pretrain_checkpoint=str(tmp_path / "nope.ckpt")), bundle)


def test_unlabeled_split_is_rejected(bundle):
    with pytest.raises(DomainError):
        check_split(StudyCache(bundle.pretrain, np.float64), "pretrain")


def test_pipeline_without_pretraining(tmp_path):
    cfg = small_config(run_dir=str(tmp_path / "run"))
    manifest = run_pipeline(cfg)
    run = tmp_path / "run"
    for name in ("config.json", "model.ckpt", "metrics.csv", "curve.csv", "audit.csv", "history.csv", "manifest.json"):
        assert (run / name).exists(), name
    assert not (run / "pretrain.ckpt").exists()
    assert "pretrain_checkpoint" not in manifest
    metrics = (run / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value" and metrics[1].startswith("balanced_accuracy,")
    audit = (run / "audit.csv").read_text().splitlines()
    n_instances = sum(s.size for s in generate_dataset(GeneratorConfig(**SMALL_GEN)).test)
    assert len(audit) == 1 + n_instances
    assert audit[0] == "study_id,instance,view_type,label,a,b,c,oracle_relevance"


def test_pipeline_with_bag_pretraining(tmp_path):
    cfg = small_config(pretrain="bag-cl", run_dir=str(tmp_path / "run"))
    manifest = run_pipeline(cfg)
    run = tmp_path / "run"
    assert manifest["pretrain_checkpoint"]["sha"] == manifest["warm_start_sha"]
    _, _, meta = load_checkpoint(run / "pretrain.ckpt")
    assert meta["mode"] == "bag-cl" and meta["dataset_fingerprint"] == manifest["dataset_fingerprint"]
    params, _, _ = load_checkpoint(run / "pretrain.ckpt")
    assert not any(k.startswith(("proj.", "out.")) for k in params)
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["pretrain_checkpoint"].endswith("pretrain.ckpt")


def test_pipeline_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        run_pipeline(small_config(run_dir=str(tmp_path / name)))
    for f in ("metrics.csv", "curve.csv", "audit.csv", "model.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_saved_model_reloads(tmp_path, bundle):
    run_pipeline(small_config(run_dir=str(tmp_path / "run")))
    model = load_model(tmp_path / "run" / "model.ckpt")
    ev = evaluate(model, StudyCache(bundle.test, model.dtype))
    line = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[1]
    assert float(line.split(",")[1]) == pytest.approx(ev.balanced_accuracy(), abs=1e-12)


def test_sweep_marks_the_best_validation_point(bundle):
    cfg = small_config(epochs=1, patience=1, lambda_sa_grid=(5.0, 15.0), tau_v_grid=(0.1,))
    rows = sweep(cfg, bundle)
    assert [(r["lambda_sa"], r["tau_v"]) for r in rows] == [(5.0, 0.1), (15.0, 0.1)]
    assert sum(r["selected"] for r in rows) == 1
    chosen = next(r for r in rows if r["selected"])
    assert chosen["val_balanced_accuracy"] == max(r["val_balanced_accuracy"] for r in rows)
    assert sweep_csv(rows).startswith("lambda_sa,tau_v,val_balanced_accuracy")


def test_aggregate_over_seeds(bundle):
    reports = [run_training(small_config(seed=s, epochs=1, patience=1), bundle).report for s in (0, 1)]
    agg = aggregate(reports, (0, 1))
    assert agg.balanced_accuracy == pytest.approx(np.mean([r.balanced_accuracy for r in reports]))
    assert [p["seed"] for p in agg.per_seed] == [0, 1]
    assert agg.confusion.sum() == 2 * len(bundle.test)


@pytest.mark.slow
def test_default_bundle_smoke_reaches_floor():
    """lambda_SA=15, tau_v=0.05 on the default bundle clears 0.60 validation balanced accuracy."""
    out = run_training(ExperimentConfig(lambda_sa=15.0, tau_v=0.05, epochs=200, patience=40))
    assert out.result.best_val_ba > 0.60
