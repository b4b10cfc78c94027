"""Stage-2 fine-tuning with early stopping, evaluation and the attention audit."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from samil.diffcore import tensor as tn
from samil.diffcore.optim import OptimizerState, cosine_lr, sgd_step
from samil.errors import ConfigurationError, DomainError
from samil.harness.config import ExperimentConfig
from samil.metrics import (
    attention_relevance_curve,
    balanced_accuracy,
    confusion_matrix,
    screening_aurocs,
)
from samil.milmodel import Batch, MILModel, init_params
from samil.synthdata import relevance_vector

log = logging.getLogger(__name__)

AUDIT_MAX_RANK = 10


class StudyCache:
    """Flattened pixels and oracle relevance of a list of studies, ready to batch."""

    def __init__(self, studies, dtype):
        self.studies = list(studies)
        self.flats = [s.flat().astype(dtype) for s in self.studies]
        self.relevance = [relevance_vector(s) for s in self.studies]
        self.labels = np.array([-1 if s.label is None else s.label for s in self.studies])

    def __len__(self):
        return len(self.studies)

    def batch(self, idx) -> tuple[Batch, np.ndarray, np.ndarray]:
        flats = [self.flats[i] for i in idx]
        sizes = np.array([f.shape[0] for f in flats], dtype=np.intp)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
        rel = np.concatenate([self.relevance[i] for i in idx])
        return Batch(np.concatenate(flats), offsets, sizes), self.labels[idx], rel


@dataclass
class Evaluation:
    probs: np.ndarray
    y_true: np.ndarray
    attentions: list  # final pooling weights C, one array per study
    relevances: list
    supervised: list = field(default_factory=list)  # A per study
    flexible: list = field(default_factory=list)  # B per study (SAMIL only)

    @property
    def y_pred(self):
        return self.probs.argmax(axis=1)

    def balanced_accuracy(self):
        return balanced_accuracy(self.y_true, self.y_pred)


def evaluate(model: MILModel, cache: StudyCache, batch_size: int = 64) -> Evaluation:
    probs, atts, sup, flex = [], [], [], []

    def per_study(t, offsets):
        return np.split(t.data.astype(np.float64), offsets[1:])

    for start in range(0, len(cache), batch_size):
        idx = np.arange(start, min(start + batch_size, len(cache)))
        batch, _, _ = cache.batch(idx)
        fwd = model.forward(batch)
        probs.append(fwd.probs.data.astype(np.float64))
        atts.extend(per_study(fwd.C, batch.offsets))
        sup.extend(per_study(fwd.A, batch.offsets))
        if fwd.B is not None:
            flex.extend(per_study(fwd.B, batch.offsets))
    return Evaluation(np.concatenate(probs), cache.labels.copy(), atts, list(cache.relevance), sup, flex)


@dataclass
class MetricsReport:
    balanced_accuracy: float
    aurocs: dict
    confusion: np.ndarray
    attention_curve: np.ndarray
    per_seed: list = field(default_factory=list)

    def rows(self):
        """Flat (metric, value) rows for the metrics CSV."""
        out = [("balanced_accuracy", self.balanced_accuracy)]
        out += [(f"auroc_{k}", v) for k, v in self.aurocs.items()]
        out += [(f"confusion_{i}{j}", int(self.confusion[i, j])) for i in range(3) for j in range(3)]
        out += [(f"attention_rank_{r + 1}", v) for r, v in enumerate(self.attention_curve)]
        return out


def metrics_report(ev: Evaluation, max_rank: int = AUDIT_MAX_RANK) -> MetricsReport:
    return MetricsReport(
        balanced_accuracy=ev.balanced_accuracy(),
        aurocs=screening_aurocs(ev.probs, ev.y_true),
        confusion=confusion_matrix(ev.y_true, ev.y_pred),
        attention_curve=attention_relevance_curve(ev.attentions, ev.relevances, max_rank),
    )


@dataclass
class TrainResult:
    model: MILModel
    best_val_ba: float
    best_epoch: int
    epochs_run: int
    history: list
    optimizer: OptimizerState


def fit(config: ExperimentConfig, train: StudyCache, val: StudyCache, model: MILModel) -> TrainResult:
    """SGD + cosine schedule on ``CE + lambda_sa * KL(R || A)``; keeps the best-validation weights.

    Training stops once ``patience`` consecutive epochs bring no strict
    improvement in validation balanced accuracy (patience 0 runs one epoch).
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError("training and validation splits must be non-empty")
    rng = np.random.default_rng([config.seed, 17])
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay, momentum=config.momentum)
    steps_per_epoch = -(-len(train) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    lambda_sa = config.lambda_sa if config.variant == "samil" else 0.0

    best_ba, best_epoch, best_state = -np.inf, -1, None
    history, bad_epochs, step = [], 0, 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch, labels, rel = train.batch(order[start:start + config.batch_size])
            opt.lr = cosine_lr(step, total_steps, config.lr)
            loss, _ = model.loss(batch, labels, rel, lambda_sa, config.tau_v)
            tn.backward(loss)
            sgd_step(model.params, opt)
            losses.append(loss.item())
            step += 1
        val_ba = evaluate(model, val).balanced_accuracy()
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_ba": val_ba})
        log.debug("epoch %d loss %.4f val_ba %.4f (%.1fs)", epoch, np.mean(losses), val_ba, time.perf_counter() - t0)
        if val_ba > best_ba:
            best_ba, best_epoch, best_state, bad_epochs = val_ba, epoch, model.params.state_dict(), 0
        else:
            bad_epochs += 1
        if bad_epochs >= config.patience:
            break
    model.params.load_state_dict(best_state)
    return TrainResult(model, float(best_ba), best_epoch, len(history), history, opt)


def build_model(config: ExperimentConfig, input_dim: int, warm_start: dict | None = None) -> MILModel:
    mcfg = config.model_config(input_dim)
    params = init_params(mcfg, seed=config.seed)
    if warm_start:
        usable = {k: v for k, v in warm_start.items() if k in params and not k.startswith("out.")}
        if not usable:
            raise ConfigurationError("pretrained checkpoint shares no parameters with the model")
        params.load_state_dict(usable, strict=False)
    return MILModel(mcfg, params)


def check_split(cache: StudyCache, name: str):
    if np.any(cache.labels < 0):
        raise DomainError(f"split {name!r} contains unlabeled studies")
