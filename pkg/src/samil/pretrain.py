"""MoCo-style contrastive pretraining at the image level and the bag level.

The query side is an encoder (optionally followed by attention pooling) and
a two-layer projection head with unit-normalised output. The key side holds
a copy of those parameters that only ever moves by an exponential moving
average of the query side. Keys from past steps are kept in a FIFO queue
and act as negatives for the InfoNCE loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from samil.diffcore import tensor as tn
from samil.diffcore.optim import OptimizerState, ParameterSet, cosine_lr, sgd_step
from samil.diffcore.tensor import Tensor
from samil.errors import ConfigurationError, ContractError, DomainError, ShapeError
from samil.milmodel import MILModel, ModelConfig, init_params, make_batch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple = (0.6, 1.0)  # side length of the crop as a fraction of the image
    flip_prob: float = 0.5
    noise_std: float = 0.05
    brightness: float = 0.2
    shift: int = 0  # maximum translation in pixels, edges replicated
    rotate: bool = False  # random multiple of 90 degrees
    contrast: float = 0.0  # contrast factor drawn from [1 - contrast, 1 + contrast]

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0, noise_std=0.0, brightness=0.0)


def _crop_resize(img, top, left, size):
    n_rows, n_cols = img.shape
    step = size / n_rows
    ys = np.clip(top + (np.arange(n_rows) + 0.5) * step - 0.5, 0, n_rows - 1)
    xs = np.clip(left + (np.arange(n_cols) + 0.5) * step - 0.5, 0, n_cols - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, n_rows - 1)
    x1 = np.minimum(x0 + 1, n_cols - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top_row = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bottom_row = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top_row * (1 - wy) + bottom_row * wy


def _shift(img, dy, dx):
    n_rows, n_cols = img.shape
    s = max(abs(dy), abs(dx))
    padded = np.pad(img, s, mode="edge")
    return padded[s - dy: s - dy + n_rows, s - dx: s - dx + n_cols]


def augment(image, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop-and-resize, horizontal flip, brightness shift and Gaussian noise.

    Translation, quarter-turn rotation and contrast jitter are applied too
    when the policy enables them.

    The output has the input's shape and dtype and is clipped to [0, 1].
    """
    img = np.asarray(image)
    out = img.astype(np.float64)
    n = img.shape[0]
    scale = rng.uniform(*policy.crop_scale)
    size = min(n, max(2, int(round(scale * n))))
    top, left = rng.integers(0, n - size + 1, size=2)
    if size < n:
        out = _crop_resize(out, top, left, size)
    if rng.uniform() < policy.flip_prob:
        out = out[:, ::-1]
    if policy.rotate:
        out = np.rot90(out, int(rng.integers(4)))
    if policy.shift:
        dy, dx = rng.integers(-policy.shift, policy.shift + 1, size=2)
        out = _shift(out, int(dy), int(dx))
    if policy.contrast:
        c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
        out = out.mean() + c * (out - out.mean())
    shift = rng.uniform(-policy.brightness, policy.brightness)
    noise = rng.standard_normal(out.shape)
    if policy.brightness or policy.noise_std:
        out = out + shift + policy.noise_std * noise
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def augment_bag(bag, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment every instance independently; keeps bag size and order."""
    images = bag.instances if hasattr(bag, "instances") else np.asarray(bag)
    return np.stack([augment(x, policy, rng) for x in images])


# ---------------------------------------------------------------- queue and losses


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("queue capacity and dimension must be positive")
        self.capacity = capacity
        self.dim = dim
        self._store = np.zeros((capacity, dim))
        self._ptr = 0
        self._size = 0

    def __len__(self):
        return self._size

    def contents(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self._size < self.capacity:
            return self._store[: self._size]
        return np.concatenate([self._store[self._ptr:], self._store[: self._ptr]])

    def push(self, keys):
        keys = np.atleast_2d(np.asarray(keys))
        if keys.shape[1] != self.dim:
            raise ShapeError(f"key dimension {keys.shape[1]} does not match queue dimension {self.dim}")
        if keys.shape[0] > self.capacity:
            keys = keys[-self.capacity:]
        n = keys.shape[0]
        end = self._ptr + n
        if end <= self.capacity:
            self._store[self._ptr:end] = keys
        else:
            split = self.capacity - self._ptr
            self._store[self._ptr:] = keys[:split]
            self._store[: n - split] = keys[split:]
        self._ptr = end % self.capacity
        self._size = min(self._size + n, self.capacity)
        return self

    @classmethod
    def random(cls, capacity, dim, rng, n=None):
        """A queue holding ``n`` random unit vectors (full when ``n`` is None)."""
        q = cls(capacity, dim)
        n = capacity if n is None else n
        if not 0 <= n <= capacity:
            raise ValueError(f"prefill {n} outside [0, {capacity}]")
        if n:
            v = rng.standard_normal((n, dim))
            q.push(v / np.linalg.norm(v, axis=1, keepdims=True))
        return q


def queue_push(queue: NegativeQueue, keys) -> NegativeQueue:
    return queue.push(keys)


def info_nce(q, k_pos, negatives, t: float = 0.1) -> Tensor:
    """Mean over rows of -log(exp(q.k+/t) / (exp(q.k+/t) + sum_p exp(q.k-_p/t))).

    ``q`` may carry gradients; ``k_pos`` and ``negatives`` are constants.
    """
    if t <= 0:
        raise DomainError(f"temperature must be positive, got {t}")
    q = tn.as_tensor(q)
    if q.ndim == 1:
        q = tn.reshape(q, (1, -1))
    k_pos = np.atleast_2d(np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos))
    negatives = np.atleast_2d(np.asarray(negatives))
    if k_pos.shape != q.shape or (negatives.size and negatives.shape[1] != q.shape[1]):
        raise ShapeError(f"query {q.shape}, positive {k_pos.shape}, negatives {negatives.shape} disagree")
    dtype = q.data.dtype
    pos = tn.mul(tn.sum(tn.mul(q, Tensor(k_pos.astype(dtype))), axis=1), 1.0 / t)
    logits = tn.reshape(pos, (-1, 1))
    if negatives.size:
        neg = tn.mul(tn.matmul(q, Tensor(negatives.T.astype(dtype))), 1.0 / t)
        logits = tn.concat([logits, neg], axis=1)
    return tn.mean(tn.sub(tn.logsumexp(logits, axis=1), pos))


# ---------------------------------------------------------------- encoders


@dataclass
class Standardizer:
    """Running per-feature standardisation of the projection-head input.

    Freshly initialised encoders map every bag to nearly the same direction,
    because pooled ReLU features share a large common component. The
    contrastive loss then falls simply by moving that common vector away
    from stale queue keys. Subtracting a running mean and dividing by a
    running standard deviation removes the shared component so the head
    sees the differences between bags. The statistics are constants for
    the gradient and are updated after each step from the query batch.
    """

    mean: np.ndarray
    var: np.ndarray
    rate: float = 0.01
    eps: float = 1e-10

    @classmethod
    def fit(cls, z, rate: float = 0.01):
        z = np.asarray(z, dtype=np.float64)
        return cls(z.mean(axis=0), z.var(axis=0), rate)

    def update(self, z):
        z = np.asarray(z, dtype=np.float64)
        self.mean = (1.0 - self.rate) * self.mean + self.rate * z.mean(axis=0)
        self.var = (1.0 - self.rate) * self.var + self.rate * ((z - self.mean) ** 2).mean(axis=0)

    def __call__(self, z: Tensor) -> Tensor:
        dtype = z.data.dtype
        inv = 1.0 / np.sqrt(self.var + self.eps)
        return tn.mul(tn.sub(z, Tensor(self.mean.astype(dtype))), Tensor(inv.astype(dtype)))


def project(z, params: ParameterSet) -> Tensor:
    """Projection head: Linear -> ReLU -> Linear, then l2 normalisation."""
    h = tn.relu(tn.add(tn.matmul(z, params["proj.0.W"]), params["proj.0.b"]))
    return tn.l2_normalize(tn.add(tn.matmul(h, params["proj.1.W"]), params["proj.1.b"]), axis=-1)


@dataclass
class EncoderPair:
    """Query parameters (trained) and key parameters (moving average of the query)."""

    config: ModelConfig
    query: ParameterSet
    key: ParameterSet
    momentum: float = 0.99
    standardizer: Standardizer | None = None

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, momentum: float = 0.99, *, pooling: bool = True):
        full = init_params(config, seed, projection_head=True)
        keep = ("enc.", "proj.", "att.") if pooling else ("enc.", "proj.")
        query = full.subset(keep)
        key = query.copy()
        for _, t in key.items():
            t.requires_grad = False
        return cls(config, query, key, momentum)

    def model(self, side: str) -> MILModel:
        return MILModel(self.config, self.query if side == "query" else self.key)

    def backbone_state(self) -> dict:
        """Query-side encoder and pooling weights; the projection head is dropped."""
        return {k: v for k, v in self.query.state_dict().items() if not k.startswith("proj.")}


def momentum_update(pair: EncoderPair) -> ParameterSet:
    """theta_k <- m * theta_k + (1 - m) * theta_q, element-wise."""
    if set(pair.query) != set(pair.key):
        raise ContractError("query and key parameter inventories differ")
    m = pair.momentum
    for name, k in pair.key.items():
        q = pair.query[name]
        if q.shape != k.shape:
            raise ContractError(f"{name}: query shape {q.shape} != key shape {k.shape}")
        k.data = m * k.data + (1.0 - m) * q.data
    return pair.key


def _head(pair: EncoderPair, z: Tensor, side: str, update: bool) -> Tensor:
    if pair.standardizer is None:
        return project(z, pair.model(side).params)
    if update:
        pair.standardizer.update(z.data)
    return project(pair.standardizer(z), pair.model(side).params)


def bag_representation_tensor(pair: EncoderPair, bags, side: str = "query", attention: str = "auto") -> Tensor:
    return pair.model(side).represent(bags, attention).z


def image_representation_tensor(pair: EncoderPair, images, side: str = "query") -> Tensor:
    model = pair.model(side)
    x = np.asarray(images)
    return model.encode(make_batch([x.reshape(x.shape[0], -1)], model.dtype))


def bag_embed(pair: EncoderPair, bags, side: str = "query", attention: str = "auto", *, update: bool = False) -> Tensor:
    """psi(sigma(f(X))) for each bag, unit norm; one row per bag.

    With ``update=True`` the pair's standardiser (if any) first absorbs this batch.
    """
    return _head(pair, bag_representation_tensor(pair, bags, side, attention), side, update)


def image_embed(pair: EncoderPair, images, side: str = "query", *, update: bool = False) -> Tensor:
    """psi(f(x)) for each image, unit norm; pooling is not used."""
    return _head(pair, image_representation_tensor(pair, images, side), side, update)


def bag_representations(params, config: ModelConfig, studies, attention="auto", batch_size=64) -> np.ndarray:
    """Pooled representations z = sigma(f(X)) of each study (no projection)."""
    model = MILModel(config, params)
    out = []
    for i in range(0, len(studies), batch_size):
        out.append(model.represent(studies[i:i + batch_size], attention).z.data)
    return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------------- kNN probe


def knn_probe(train_emb, train_labels, val_emb, val_labels, k: int = 5, *, center: bool = True) -> float:
    """Accuracy of a cosine-similarity k-nearest-neighbour vote.

    With ``center=True`` both sets are shifted by the mean training embedding
    first. Pooled ReLU features share a large positive mean direction that
    makes raw cosine similarities nearly constant; removing it lets the
    vote see how bags differ. Vote ties go to the smallest class index.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    val_emb = np.asarray(val_emb, dtype=np.float64)
    if center and len(train_emb):
        mean = train_emb.mean(axis=0)
        train_emb, val_emb = train_emb - mean, val_emb - mean
    train_labels = np.asarray(train_labels, dtype=np.intp)
    val_labels = np.asarray(val_labels, dtype=np.intp)
    if k < 1 or k > len(train_emb):
        raise DomainError(f"k={k} must lie in [1, {len(train_emb)}]")
    a = train_emb / np.maximum(np.linalg.norm(train_emb, axis=1, keepdims=True), 1e-12)
    b = val_emb / np.maximum(np.linalg.norm(val_emb, axis=1, keepdims=True), 1e-12)
    sim = b @ a.T
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    n_classes = int(max(train_labels.max(), val_labels.max())) + 1
    votes = np.zeros((len(val_emb), n_classes), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(len(val_emb)), k), train_labels[nearest].ravel()), 1)
    pred = votes.argmax(axis=1)  # argmax returns the first (smallest) class on ties
    return float(np.mean(pred == val_labels))


# ---------------------------------------------------------------- training loops


@dataclass
class PretrainResult:
    backbone: dict
    pair: EncoderPair
    queue: NegativeQueue
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_probe: float = float("nan")
    steps: int = 0


def prefilled_queue(units, key_fn, cfg, dim, rng, chunk) -> NegativeQueue:
    """Queue holding keys of randomly drawn, augmented units under the initial key encoder.

    Starting from real keys keeps the difficulty of the negatives roughly
    constant over training, so the loss curve reflects learning rather than
    the turnover of the queue.
    """
    queue = NegativeQueue(cfg.queue_size, dim)
    n = cfg.queue_size if cfg.queue_prefill is None else cfg.queue_prefill
    if not 0 <= n <= cfg.queue_size:
        raise ConfigurationError(f"queue_prefill {n} outside [0, {cfg.queue_size}]")
    picks = rng.integers(0, len(units), size=n)
    for i in range(0, n, chunk):
        queue.push(key_fn([units[j] for j in picks[i:i + chunk]]))
    return queue


def _policy(cfg) -> AugmentationPolicy:
    return AugmentationPolicy(tuple(cfg.crop_scale), cfg.flip_prob, cfg.noise_std, cfg.brightness,
                              cfg.shift, cfg.rotate, cfg.contrast)


def _prober(params_fn, model_config, probe_sets, cfg):
    if probe_sets is None:
        return None
    (tr_studies, tr_labels), (va_studies, va_labels) = probe_sets
    attention = "supervised" if cfg.attention == "supervised" else "auto"

    def probe():
        params = params_fn()
        tr = bag_representations(params, model_config, tr_studies, attention)
        va = bag_representations(params, model_config, va_studies, attention)
        return knn_probe(tr, tr_labels, va, va_labels, cfg.knn_k)

    return probe


def _run(pair, queue, units, step_fn, cfg, lr, rng, batch_size, probe, snapshot):
    opt = OptimizerState(lr=lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    n_batches = -(-len(units) // batch_size)
    if cfg.steps_per_epoch:
        n_batches = min(n_batches, cfg.steps_per_epoch)
    total = cfg.epochs * n_batches
    history, step, bad = [], 0, 0
    best = (-np.inf, -1, snapshot())
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(units))
        losses = []
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            opt.lr = cosine_lr(step, total, lr)
            loss, keys = step_fn([units[i] for i in idx], queue.contents())
            tn.backward(loss)
            sgd_step(pair.query, opt)
            momentum_update(pair)
            queue.push(keys)
            losses.append(loss.item())
            step += 1
        acc = probe() if probe else float("nan")
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "knn": acc})
        log.debug("pretrain epoch %d loss %.4f knn %.4f", epoch, np.mean(losses), acc)
        if probe is None or acc > best[0]:
            best, bad = (acc, epoch, snapshot()), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return best, history, step


def pretrain_bag_cl(dataset, config, model_config: ModelConfig, probe_sets=None) -> PretrainResult:
    """Bag-level MoCo: each step contrasts two augmentations of one whole study.

    ``dataset`` is a list of studies (labels are ignored). ``probe_sets`` is
    ``((train_studies, train_labels), (val_studies, val_labels))`` for kNN
    early stopping, or None to train for the full number of epochs.
    Returns the encoder and pooling weights; the projection head is discarded.
    """
    if not dataset:
        raise ConfigurationError("pretraining dataset is empty")
    rng = np.random.default_rng([config.seed, 101])
    pair = EncoderPair.create(model_config, config.seed, config.key_momentum, pooling=True)
    policy = _policy(config)
    attention = "supervised" if config.attention == "supervised" else "auto"

    if config.standardize:
        sample = [dataset[i] for i in rng.permutation(len(dataset))[:256]]
        pair.standardizer = Standardizer.fit(
            bag_representations(pair.query, model_config, sample, attention), config.stat_rate)

    def keys(studies):
        views = [augment_bag(s, policy, rng) for s in studies]
        return bag_embed(pair, views, "key", attention).data

    def step(studies, negatives):
        query_views = [augment_bag(s, policy, rng) for s in studies]
        q = bag_embed(pair, query_views, "query", attention, update=True)
        k = keys(studies)
        return info_nce(q, k, negatives, config.temperature), k

    queue = prefilled_queue(list(dataset), keys, config, model_config.projection_dim, rng, chunk=64)

    probe = _prober(lambda: pair.query, model_config, probe_sets, config)
    (acc, epoch, state), history, steps = _run(
        pair, queue, list(dataset), step, config, config.lr * config.lr_scale, rng,
        config.batch_size, probe, pair.backbone_state,
    )
    return PretrainResult(state, pair, queue, history, epoch, acc, steps)


def pretrain_img_cl(dataset, config, model_config: ModelConfig, probe_sets=None) -> PretrainResult:
    """Image-level MoCo over every instance of every study; pooling is not trained.

    The returned weights carry the attention parameters of a fresh model so
    that they can warm-start a complete MIL model.
    """
    if not dataset:
        raise ConfigurationError("pretraining dataset is empty")
    rng = np.random.default_rng([config.seed, 202])
    pair = EncoderPair.create(model_config, config.seed, config.key_momentum, pooling=False)
    policy = _policy(config)
    images = [img for s in dataset for img in (s.instances if hasattr(s, "instances") else s)]
    pooling = init_params(model_config, config.seed).subset(("att.",))

    def with_pooling():
        merged = pair.query.subset(("enc.",))
        for k, t in pooling.items():
            merged._params[k] = t
        return merged

    def snapshot():
        state = pair.backbone_state()
        state.update(pooling.state_dict())
        return state

    if config.standardize:
        sample = np.stack([images[i] for i in rng.permutation(len(images))[:2048]])
        pair.standardizer = Standardizer.fit(image_representation_tensor(pair, sample).data, config.stat_rate)

    def keys(batch):
        return image_embed(pair, np.stack([augment(x, policy, rng) for x in batch]), "key").data

    def step(batch, negatives):
        q = image_embed(pair, np.stack([augment(x, policy, rng) for x in batch]), "query", update=True)
        k = keys(batch)
        return info_nce(q, k, negatives, config.temperature), k

    queue = prefilled_queue(images, keys, config, model_config.projection_dim, rng, chunk=512)

    probe = _prober(with_pooling, model_config, probe_sets, config)
    (acc, epoch, state), history, steps = _run(
        pair, queue, images, step, config, config.img_lr, rng, config.img_batch_size, probe, snapshot,
    )
    return PretrainResult(state, pair, queue, history, epoch, acc, steps)
