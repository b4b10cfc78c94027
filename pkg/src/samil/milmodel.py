"""Attention-pooled MIL classifiers (ABMIL, gated ABMIL, SAMIL) and their losses.

All functions accept a single bag (``offsets=None``) or several bags stacked
row-wise with ``offsets`` marking where each bag starts. Attention vectors
are then concatenated in the same order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from samil.diffcore import tensor as tn
from samil.diffcore.optim import ParameterSet
from samil.diffcore.tensor import Tensor
from samil.errors import DegenerateAttentionError, DomainError, ShapeError

VARIANTS = ("abmil", "abmil-gated", "samil")
N_CLASSES = 3


@dataclass
class ModelConfig:
    input_dim: int = 256
    hidden: tuple = (500, 250, 500)
    attention_dim: int = 128
    variant: str = "samil"
    projection_dim: int = 128
    # when True, the supervised-attention loss does not backpropagate into the encoder
    sa_stop_gradient: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.hidden or min(self.hidden) <= 0 or self.attention_dim <= 0 or self.input_dim <= 0:
            raise ValueError("all layer widths must be positive")

    @property
    def embed_dim(self) -> int:
        return self.hidden[-1]

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class Batch(NamedTuple):
    x: np.ndarray  # (N, D) stacked instances
    offsets: np.ndarray  # (B,) start row of each bag
    sizes: np.ndarray  # (B,)

    @property
    def n_bags(self) -> int:
        return len(self.offsets)


def make_batch(bags, dtype=np.float64) -> Batch:
    """Stack bags (arrays of shape (K, ...) or objects with ``flat()``) into one batch."""
    flats = []
    for bag in bags:
        arr = bag.flat() if callable(getattr(bag, "flat", None)) else np.asarray(bag)
        arr = arr.reshape(arr.shape[0], -1)
        if arr.shape[0] < 1:
            raise ShapeError("bags must contain at least one instance")
        flats.append(arr)
    sizes = np.array([a.shape[0] for a in flats], dtype=np.intp)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
    return Batch(np.concatenate(flats).astype(dtype, copy=False), offsets, sizes)


def _offsets(offsets):
    return np.array([0]) if offsets is None else offsets


# ---------------------------------------------------------------- building blocks


def encode_bag(x, layers) -> Tensor:
    """Row-wise feed-forward encoder: ``h = relu(... relu(x W0 + b0) ...)``.

    ``layers`` is a sequence of ``(W, b)`` tensors with ``W`` of shape (in, out).
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim != 2:
        raise ShapeError(f"instances must be flattened to (K, D), got {h.shape}")
    if h.shape[1] != layers[0][0].shape[0]:
        raise ShapeError(f"instance size {h.shape[1]} does not match encoder input {layers[0][0].shape[0]}")
    for W, b in layers:
        h = tn.relu(tn.add(tn.matmul(h, W), b))
    return h


def attention_logits(H, U, w) -> Tensor:
    return tn.matmul(tn.tanh(tn.matmul(H, tn.transpose(U))), w)


def attention_weights(H, U, w, offsets=None) -> Tensor:
    """a_k = softmax_k(w^T tanh(U h_k)) within each bag."""
    return tn.segment_softmax(attention_logits(H, U, w), _offsets(offsets))


def gated_attention_weights(H, U, V, w, offsets=None) -> Tensor:
    """Gated variant: logits w^T (tanh(U h_k) * sigmoid(V h_k))."""
    gate = tn.mul(tn.tanh(tn.matmul(H, tn.transpose(U))), tn.sigmoid(tn.matmul(H, tn.transpose(V))))
    return tn.segment_softmax(tn.matmul(gate, w), _offsets(offsets))


def combine_attention(A, B, offsets=None) -> Tensor:
    """c_k = a_k b_k / sum_j a_j b_j within each bag."""
    A, B = tn.as_tensor(A), tn.as_tensor(B)
    if A.shape != B.shape or A.ndim != 1:
        raise ShapeError(f"attention vectors differ in shape: {A.shape} vs {B.shape}")
    offsets = _offsets(offsets)
    prod = tn.mul(A, B)
    total = tn.segment_sum(prod, offsets)
    if np.any(total.data <= 0.0):
        raise DegenerateAttentionError("every a_k * b_k is zero in at least one bag")
    return tn.div(prod, tn.broadcast_segments(total, offsets, A.shape[0]))


def pool(H, weights, offsets=None) -> Tensor:
    """Attention-weighted sum of instance embeddings, one row per bag."""
    H, weights = tn.as_tensor(H), tn.as_tensor(weights)
    if weights.ndim != 1 or weights.shape[0] != H.shape[0]:
        raise ShapeError(f"weights of shape {weights.shape} do not match {H.shape[0]} instances")
    return tn.segment_sum(tn.mul(H, tn.reshape(weights, (-1, 1))), _offsets(offsets))


def classify(z, W, b) -> Tensor:
    """Linear-softmax output layer with per-class intercepts; z is (B, M) or (M,)."""
    z = tn.as_tensor(z)
    if z.ndim == 1:
        z = tn.reshape(z, (1, -1))
    if z.shape[1] != W.shape[1]:
        raise ShapeError(f"embedding size {z.shape[1]} does not match output weights {W.shape}")
    return tn.softmax(tn.add(tn.matmul(z, tn.transpose(W)), b), axis=-1)


def relevance_targets(v_probs, tau_v, offsets=None) -> np.ndarray:
    """Temperature softmax of view-relevance probabilities; a constant target."""
    if tau_v <= 0:
        raise DomainError(f"tau_v must be positive, got {tau_v}")
    v = np.asarray(v_probs, dtype=np.float64)
    return tn.segment_softmax(Tensor(v), _offsets(offsets), tau_v).data


def supervised_attention_loss(R, A, n_bags=1) -> Tensor:
    """KL(R || A) averaged over bags."""
    R = np.asarray(R)
    if R.shape != A.shape:
        raise ShapeError(f"targets {R.shape} and attention {A.shape} differ")
    return tn.mul(tn.kl_div(Tensor(R.astype(A.data.dtype)), A), 1.0 / n_bags)


def combine_losses(ce, sa, lambda_sa):
    """Total objective CE + lambda_sa * SA."""
    return tn.add(ce, tn.mul(sa, lambda_sa)) if isinstance(ce, Tensor) else ce + lambda_sa * sa


def diagnosis_loss(probs, labels) -> Tensor:
    """Mean of -log probs[label] over bags, with the probability floored at 1e-12."""
    probs = tn.as_tensor(probs)
    if probs.ndim == 1:
        probs = tn.reshape(probs, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != probs.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {probs.shape[0]} bags")
    if not np.all(np.isin(labels, np.arange(probs.shape[1]))):
        raise DomainError(f"labels must lie in 0..{probs.shape[1] - 1}, got {labels}")
    picked = tn.take(probs, (np.arange(len(labels)), labels.astype(np.intp)))
    return tn.mul(tn.sum(tn.log(picked)), -1.0 / len(labels))


# ---------------------------------------------------------------- model


class Forward(NamedTuple):
    probs: Tensor
    A: Tensor
    B: Tensor | None
    C: Tensor
    z: Tensor
    H: Tensor
    offsets: np.ndarray


def init_params(config: ModelConfig, seed: int = 0, *, projection_head: bool = False) -> ParameterSet:
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    ps = ParameterSet()

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    widths = (config.input_dim, *config.hidden)
    for i, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        ps.add(f"enc.{i}.W", uniform((fin, fout), fin))
        ps.add(f"enc.{i}.b", uniform((fout,), fin))
    M, L = config.embed_dim, config.attention_dim
    ps.add("att.U", uniform((L, M), M))
    ps.add("att.w", uniform((L,), L))
    if config.variant == "abmil-gated":
        ps.add("att.V", uniform((L, M), M))
    if config.variant == "samil":
        ps.add("att.Ub", uniform((L, M), M))
        ps.add("att.wb", uniform((L,), L))
    ps.add("out.W", uniform((N_CLASSES, M), M))
    ps.add("out.b", uniform((N_CLASSES,), M))
    if projection_head:
        add_projection_head(ps, config, rng)
    return ps


def add_projection_head(ps: ParameterSet, config: ModelConfig, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = np.dtype(config.dtype)
    M, P = config.embed_dim, config.projection_dim
    bound = 1.0 / np.sqrt(M)
    ps.add("proj.0.W", rng.uniform(-bound, bound, (M, M)).astype(dtype))
    ps.add("proj.0.b", rng.uniform(-bound, bound, (M,)).astype(dtype))
    ps.add("proj.1.W", rng.uniform(-bound, bound, (M, P)).astype(dtype))
    ps.add("proj.1.b", rng.uniform(-bound, bound, (P,)).astype(dtype))


class MILModel:
    """Parameters plus the wiring of one of the three pooling variants."""

    def __init__(self, config: ModelConfig, params: ParameterSet | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def encoder_layers(self):
        n = len(self.config.hidden)
        return [(self.params[f"enc.{i}.W"], self.params[f"enc.{i}.b"]) for i in range(n)]

    def batch(self, bags) -> Batch:
        if isinstance(bags, Batch):
            return bags
        if callable(getattr(bags, "flat", None)) or isinstance(bags, np.ndarray):
            bags = [bags]
        return make_batch(bags, self.dtype)

    def encode(self, batch: Batch) -> Tensor:
        return encode_bag(Tensor(batch.x.astype(self.dtype, copy=False)), self.encoder_layers())

    def attend(self, H, offsets, attention="auto"):
        """Return (A, B, C) for the configured variant.

        ``attention="supervised"`` forces the SAMIL model to pool with A only.
        """
        p = self.params
        variant = self.config.variant
        if variant == "abmil-gated":
            A = gated_attention_weights(H, p["att.U"], p["att.V"], p["att.w"], offsets)
        else:
            A = attention_weights(H, p["att.U"], p["att.w"], offsets)
        if variant != "samil" or attention == "supervised":
            return A, None, A
        B = attention_weights(H, p["att.Ub"], p["att.wb"], offsets)
        return A, B, combine_attention(A, B, offsets)

    def represent(self, bags, attention="auto") -> Forward:
        """Encoder and pooling only; ``probs`` is None. Needs no output-layer parameters."""
        batch = self.batch(bags)
        H = self.encode(batch)
        A, B, C = self.attend(H, batch.offsets, attention)
        z = pool(H, C, batch.offsets)
        return Forward(None, A, B, C, z, H, batch.offsets)

    def forward(self, bags, attention="auto") -> Forward:
        rep = self.represent(bags, attention)
        probs = classify(rep.z, self.params["out.W"], self.params["out.b"])
        return rep._replace(probs=probs)

    def loss(self, bags, labels, v_probs=None, lambda_sa=0.0, tau_v=0.1, ce_weight=1.0):
        """Total loss ``ce_weight * CE + lambda_sa * KL(R || A)``; returns (loss, forward).

        ``v_probs`` is the concatenated view relevance of every instance.
        """
        if lambda_sa < 0:
            raise DomainError(f"lambda_sa must be non-negative, got {lambda_sa}")
        fwd = self.forward(bags)
        ce = diagnosis_loss(fwd.probs, labels)
        total = ce if ce_weight == 1.0 else tn.mul(ce, ce_weight)
        if lambda_sa > 0:
            if v_probs is None:
                raise ValueError("v_probs are required when lambda_sa > 0")
            R = relevance_targets(v_probs, tau_v, fwd.offsets)
            A = fwd.A
            if self.config.sa_stop_gradient:
                A = self.attend(fwd.H.detach(), fwd.offsets)[0]
            total = combine_losses(total, supervised_attention_loss(R, A, len(fwd.offsets)), lambda_sa)
        return total, fwd

    def predict_proba(self, bags, batch_size=64) -> np.ndarray:
        bags = list(bags)
        out = [self.forward(bags[i:i + batch_size]).probs.data for i in range(0, len(bags), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def samil_forward(bag, model: MILModel):
    """(probs, A, B, C, z) for a single bag, as plain arrays."""
    f = model.forward(bag)
    return f.probs.data[0], f.A.data, f.B.data, f.C.data, f.z.data[0]


def abmil_forward(bag, model: MILModel):
    """(probs, A, z) for a single bag under an ABMIL model."""
    f = model.forward(bag)
    return f.probs.data[0], f.A.data, f.z.data[0]


def samil_loss(bag, label, v_probs, lambda_sa, tau_v, model: MILModel) -> Tensor:
    return model.loss(bag, [label], v_probs, lambda_sa, tau_v)[0]
