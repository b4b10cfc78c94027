"""Synthetic multi-view "studies" with known view relevance.

Each study is a bag of small grayscale images. Only the two relevant view
types carry the severity label (a ring whose width grows with severity, and
a central blob whose spread grows with severity). Irrelevant views are
rendered without looking at the label; one of them mimics the relevant ring
with a width driven partly by a study-level nuisance value, so averaging
over all images is actively misleading.

Every random draw that shapes a study is taken from a per-study generator
seeded by ``(seed, split, index)`` and the sequence of draws never depends
on the label. Regenerating a study with a different label therefore only
changes its relevant-view images.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from samil.errors import ConfigurationError, FormatError

SPLITS = ("train", "val", "test", "pretrain")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


class ViewType(enum.IntEnum):
    RELEVANT_A = 0
    RELEVANT_B = 1
    IRRELEVANT_1 = 2
    IRRELEVANT_2 = 3
    IRRELEVANT_3 = 4

    @property
    def relevant(self) -> bool:
        return self in (ViewType.RELEVANT_A, ViewType.RELEVANT_B)


RELEVANT_VIEWS = (ViewType.RELEVANT_A, ViewType.RELEVANT_B)
IRRELEVANT_VIEWS = (ViewType.IRRELEVANT_1, ViewType.IRRELEVANT_2, ViewType.IRRELEVANT_3)


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 500
    n_val: int = 150
    n_test: int = 150
    n_pretrain: int = 300
    class_proportions: tuple = (0.4, 0.3, 0.3)
    k_min: int = 20
    k_max: int = 60
    relevant_fraction: tuple = (0.2, 0.5)
    image_size: int = 16
    signal_scale: float = 0.6
    noise_std: float = 0.15
    oracle_noise: float = 0.05
    distractor_strength: float = 0.5
    distractor_share: float = 0.8
    distractor_cue: float = 0.1
    seed: int = 0

    def validate(self):
        p = np.asarray(self.class_proportions, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"class proportions must be 3 non-negative values summing to 1: {self.class_proportions}")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigurationError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        lo, hi = self.relevant_fraction
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigurationError(f"bad relevant fraction range {self.relevant_fraction}")
        if not 0.0 <= self.oracle_noise < 0.5:
            raise ConfigurationError(f"oracle noise must lie in [0, 0.5), got {self.oracle_noise}")
        if not 0.0 <= self.distractor_strength <= 1.0 or not 0.0 <= self.distractor_share <= 1.0:
            raise ConfigurationError("distractor strength and share must lie in [0, 1]")
        if min(self.n_train, self.n_val, self.n_test) < 1 or self.n_pretrain < 0:
            raise ConfigurationError("train/val/test splits must be non-empty")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")
        for n in (self.n_train, self.n_val, self.n_test):
            counts = class_counts(n, p)
            if any(c == 0 for c, q in zip(counts, p) if q > 0):
                raise ConfigurationError(f"split of size {n} cannot realise proportions {self.class_proportions}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["class_proportions"] = list(self.class_proportions)
        d["relevant_fraction"] = list(self.relevant_fraction)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("class_proportions", "relevant_fraction"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SyntheticStudy:
    study_id: str
    instances: np.ndarray  # (K, H, W) float32 in [0, 1]
    label: int | None
    view_types: np.ndarray = field(repr=False)  # hidden
    oracle_relevance: np.ndarray = field(repr=False)  # hidden except via oracle_view_relevance
    nuisance: float = field(default=0.0, repr=False)  # hidden

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    def flat(self) -> np.ndarray:
        return self.instances.reshape(self.size, -1)

    def __eq__(self, other):
        if not isinstance(other, SyntheticStudy):
            return NotImplemented
        return (
            self.study_id == other.study_id
            and self.label == other.label
            and self.nuisance == other.nuisance
            and np.array_equal(self.instances, other.instances)
            and np.array_equal(self.view_types, other.view_types)
            and np.array_equal(self.oracle_relevance, other.oracle_relevance)
        )


@dataclass
class DatasetBundle:
    train: list
    val: list
    test: list
    pretrain: list
    config: GeneratorConfig
    fingerprint: str

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.config == other.config
            and self.fingerprint == other.fingerprint
            and all(self.split(s) == other.split(s) for s in SPLITS)
        )


# ---------------------------------------------------------------- rendering


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def render_instance(view: ViewType, severity: int, rng: np.random.Generator, *,
                    nuisance: float = 0.5, config: GeneratorConfig | None = None) -> np.ndarray:
    """Render one image. Irrelevant views never read ``severity``.

    ``nuisance`` in [0, 1] is the study-level value that drives the width of
    the ring-shaped distractor (``IRRELEVANT_1``).
    """
    cfg = config or GeneratorConfig()
    view = ViewType(view)
    if severity not in (0, 1, 2):
        raise ValueError(f"severity must be 0, 1 or 2, got {severity}")
    n = cfg.image_size
    yy, xx = _grid(n)
    centre = (n - 1) / 2.0
    scale = n / 16.0

    img = 0.1 + cfg.noise_std * rng.standard_normal((n, n))
    cy, cx = centre + rng.uniform(-0.75, 0.75, size=2) * scale
    r = np.hypot(yy - cy, xx - cx)
    amp = rng.uniform(0.45, 0.6)

    if view in (ViewType.IRRELEVANT_1, ViewType.IRRELEVANT_3):
        a = cfg.distractor_strength
        level = 2.0 * (a * nuisance + (1.0 - a) * rng.uniform())
        cue_pos = int(round(centre + rng.uniform(-1.0, 1.0) * scale))
    else:
        level = float(severity)

    if view in (ViewType.RELEVANT_A, ViewType.IRRELEVANT_1):
        width = (0.6 + 0.3 * cfg.signal_scale * level) * scale
        img += amp * np.exp(-0.5 * ((r - 4.5 * scale) / width) ** 2)
    elif view in (ViewType.RELEVANT_B, ViewType.IRRELEVANT_3):
        spread = (1.0 + 0.35 * cfg.signal_scale * level) * scale
        img += amp * np.exp(-0.5 * (r / spread) ** 2)
    else:
        freq = rng.uniform(0.15, 0.35) / scale
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        img += 0.5 * amp * (1.0 + np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase))

    # look-alike distractors differ from the relevant views only by a faint bar
    if view is ViewType.IRRELEVANT_1:
        img[max(cue_pos - 1, 0): cue_pos + 1, :] += cfg.distractor_cue
    elif view is ViewType.IRRELEVANT_3:
        img[:, max(cue_pos - 1, 0): cue_pos + 1] += cfg.distractor_cue
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- studies


def generate_study(config: GeneratorConfig, label: int | None, rng: np.random.Generator,
                   study_id: str = "study", *, severity: int | None = None) -> SyntheticStudy:
    """Draw one study.

    An unlabeled study (``label=None``) is rendered at the hidden ``severity``
    (default 0); a labeled study is always rendered at its label.
    """
    if label is not None:
        severity = label
    severity = 0 if severity is None else int(severity)
    if severity not in (0, 1, 2):
        raise ValueError(f"severity must be 0, 1 or 2, got {severity}")
    k = int(rng.integers(config.k_min, config.k_max + 1))
    frac = rng.uniform(*config.relevant_fraction)
    n_rel = min(k, max(1, int(round(frac * k))))
    nuisance = float(rng.uniform())

    views = np.empty(k, dtype=np.int64)
    views[:n_rel] = rng.choice([int(v) for v in RELEVANT_VIEWS], size=n_rel)
    share = config.distractor_share
    views[n_rel:] = rng.choice([int(v) for v in IRRELEVANT_VIEWS], size=k - n_rel,
                               p=[share / 2.0, 1.0 - share, share / 2.0])
    views = views[rng.permutation(k)]

    images = np.stack([render_instance(ViewType(v), severity, rng, nuisance=nuisance, config=config) for v in views])

    indicator = np.isin(views, [int(v) for v in RELEVANT_VIEWS]).astype(np.float64)
    flip = rng.uniform(size=k) < config.oracle_noise
    replacement = rng.uniform(size=k)
    relevance = np.where(flip, replacement, indicator)

    return SyntheticStudy(
        study_id=study_id,
        instances=images.astype(np.float32),
        label=label,
        view_types=views.astype(np.uint8),
        oracle_relevance=relevance,
        nuisance=nuisance,
    )


def oracle_view_relevance(study: SyntheticStudy, index: int) -> float:
    """Noisy relevance of one instance; the only relevance channel training may read."""
    if not 0 <= index < study.size:
        raise IndexError(f"instance index {index} out of range for a bag of {study.size}")
    return float(study.oracle_relevance[index])


def relevance_vector(study: SyntheticStudy) -> np.ndarray:
    return np.array([oracle_view_relevance(study, k) for k in range(study.size)])


def class_counts(n: int, proportions) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to the three classes."""
    p = np.asarray(proportions, dtype=float)
    raw = p * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _study_rng(seed, split, index):
    return np.random.default_rng([seed, _SPLIT_CODE[split], index])


def _split_labels(config, split, n):
    counts = class_counts(n, config.class_proportions)
    labels = np.repeat(np.arange(3), counts)
    rng = np.random.default_rng([config.seed, _SPLIT_CODE[split], 1_000_003])
    return rng.permutation(labels).tolist()


def generate_dataset(config: GeneratorConfig) -> DatasetBundle:
    config.validate()
    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test, "pretrain": config.n_pretrain}
    splits = {}
    for split in SPLITS:
        n = sizes[split]
        severities = _split_labels(config, split, n)
        # the pretraining pool has the same class mix but its labels are withheld
        labels = [None] * n if split == "pretrain" else severities
        splits[split] = [
            generate_study(config, labels[i], _study_rng(config.seed, split, i), f"{split}-{i:05d}",
                           severity=severities[i])
            for i in range(n)
        ]
    return DatasetBundle(**splits, config=config, fingerprint=config.fingerprint())


# ---------------------------------------------------------------- persistence
#
# Dataset file layout (little-endian):
#   magic b"SAMILDS\x00", version u32, header_len u32, header JSON
#   (config echo, fingerprint, split sizes); then for each split in
#   SPLITS order: n_studies u32 followed by n study records:
#     id_len u16, id (UTF-8), label i8 (-1 = unlabeled), K u32, H u16, W u16,
#     nuisance f64, view types u8 x K, oracle relevance f64 x K,
#     pixels f32 x (K*H*W) in C order
#   and finally crc32 (u32) over all preceding bytes.

DS_MAGIC = b"SAMILDS\x00"
DS_VERSION = 1


def dataset_to_bytes(bundle: DatasetBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(DS_MAGIC)
    buf.write(struct.pack("<I", DS_VERSION))
    header = {
        "config": bundle.config.to_dict(),
        "fingerprint": bundle.fingerprint,
        "sizes": {s: len(bundle.split(s)) for s in SPLITS},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for split in SPLITS:
        studies = bundle.split(split)
        buf.write(struct.pack("<I", len(studies)))
        for st in studies:
            sid = st.study_id.encode()
            k, h, w = st.instances.shape
            buf.write(struct.pack("<H", len(sid)))
            buf.write(sid)
            buf.write(struct.pack("<bIHHd", -1 if st.label is None else st.label, k, h, w, st.nuisance))
            buf.write(np.asarray(st.view_types, dtype="u1").tobytes())
            buf.write(np.asarray(st.oracle_relevance, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(st.instances, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def _take(buf, n):
    chunk = buf.read(n)
    if len(chunk) != n:
        raise FormatError("unexpected end of dataset file")
    return chunk


def dataset_from_bytes(blob: bytes) -> DatasetBundle:
    if len(blob) < len(DS_MAGIC) + 12:
        raise FormatError("dataset file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("dataset checksum mismatch (corrupt or truncated)")
    buf = io.BytesIO(body)
    if _take(buf, len(DS_MAGIC)) != DS_MAGIC:
        raise FormatError("not a dataset file")
    (version,) = struct.unpack("<I", _take(buf, 4))
    if version != DS_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    (hlen,) = struct.unpack("<I", _take(buf, 4))
    header = json.loads(_take(buf, hlen))
    splits = {}
    for split in SPLITS:
        (n,) = struct.unpack("<I", _take(buf, 4))
        studies = []
        for _ in range(n):
            (id_len,) = struct.unpack("<H", _take(buf, 2))
            sid = _take(buf, id_len).decode()
            label, k, h, w, nuisance = struct.unpack("<bIHHd", _take(buf, struct.calcsize("<bIHHd")))
            views = np.frombuffer(_take(buf, k), dtype="u1").copy()
            rel = np.frombuffer(_take(buf, 8 * k), dtype="<f8").astype(np.float64)
            px = np.frombuffer(_take(buf, 4 * k * h * w), dtype="<f4").astype(np.float32).reshape(k, h, w)
            studies.append(SyntheticStudy(sid, px, None if label < 0 else int(label), views, rel, nuisance))
        splits[split] = studies
    if buf.read(1):
        raise FormatError("trailing bytes in dataset file")
    config = GeneratorConfig.from_dict(header["config"])
    return DatasetBundle(**splits, config=config, fingerprint=header["fingerprint"])


def save_dataset(bundle: DatasetBundle, path):
    Path(path).write_bytes(dataset_to_bytes(bundle))


def load_dataset(path) -> DatasetBundle:
    return dataset_from_bytes(Path(path).read_bytes())
