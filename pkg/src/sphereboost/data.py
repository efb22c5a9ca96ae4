"""Hardness-imbalanced synthetic datasets on the unit hypersphere.

Each class is a random unit prototype; a sample is the renormalized sum of
its prototype and isotropic Gaussian noise whose sigma depends on the
sample's tier (easy or hard).  Most samples are easy, mirroring the quality
imbalance of large recognition corpora.  A fixed fraction of classes is
held out for open-set evaluation: verification pairs, a one-easy-sample
gallery, and hard probes.

The tier is generation metadata: training-path modules never read it (a
test enforces this statically); it only stratifies evaluation reports.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, UnsupportedVersionError
from .model import unit_rows

MAGIC = b"SBDS"
FORMAT_VERSION = 1

EVAL_CLASS_FRACTION = 0.2
POSITIVE_PAIR_CAP = 2000
MIN_CLASSES = 5

TIER_EASY, TIER_HARD = 0, 1
TIER_NAMES = ("easy", "hard")
PAIR_TAG_NAMES = ("easy-easy", "mixed", "hard-hard")  # indexed by tier_a + tier_b

# SeedSequence spawn keys, one independent counter-based stream per purpose.
_STREAM_PROTOTYPES = 0
_STREAM_NOISE = 1
_STREAM_PAIRS = 2


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 62
    samples_per_class: int = 120
    input_dim: int = 32
    easy_fraction: float = 0.85
    easy_noise: float = 0.15
    hard_noise: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"data.num_classes must be >= 1, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError(
                f"data.samples_per_class must be >= 1, got {self.samples_per_class}"
            )
        if self.input_dim < 2:
            raise ConfigError(f"data.input_dim must be >= 2, got {self.input_dim}")
        if not 0.0 < self.easy_fraction <= 1.0:
            raise ConfigError(
                f"data.easy_fraction must lie in (0, 1], got {self.easy_fraction}"
            )
        if not 0.0 < self.easy_noise < self.hard_noise:
            raise ConfigError(
                "data noise levels must satisfy 0 < easy_noise < hard_noise, got "
                f"easy_noise={self.easy_noise} hard_noise={self.hard_noise}"
            )
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"data.seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class LabeledSample:
    sample_id: int
    x: np.ndarray
    class_id: int
    tier: str


@dataclass
class EvalSplit:
    """Held-out verification pairs, gallery and probes (all by sample id)."""

    pair_a: np.ndarray      # (P,) int64 sample ids
    pair_b: np.ndarray      # (P,) int64
    pair_same: np.ndarray   # (P,) bool
    pair_tag: np.ndarray    # (P,) uint8 index into PAIR_TAG_NAMES
    gallery_ids: np.ndarray  # one easy sample per held-out class
    probe_ids: np.ndarray    # hard samples of held-out classes


@dataclass
class SynthDataset:
    config: GenConfig
    prototypes: np.ndarray   # (num_classes, input_dim) unit rows
    train_ids: np.ndarray    # (N,) int64
    train_x: np.ndarray      # (N, input_dim) unit rows
    train_y: np.ndarray      # (N,) uint32 class ids
    train_tier: np.ndarray   # (N,) uint8
    eval_ids: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    eval_tier: np.ndarray
    split: EvalSplit

    @property
    def num_train(self) -> int:
        return len(self.train_ids)

    def eval_rows(self, sample_ids: np.ndarray) -> np.ndarray:
        """Row indices into the eval arrays for the given sample ids."""
        order = np.argsort(self.eval_ids)
        pos = np.searchsorted(self.eval_ids, sample_ids, sorter=order)
        if np.any(pos >= len(order)):
            raise DataFormatError("sample id not found among evaluation samples")
        rows = order[pos]
        if np.any(self.eval_ids[rows] != sample_ids):
            raise DataFormatError("sample id not found among evaluation samples")
        return rows

    def train_sample(self, row: int) -> LabeledSample:
        return LabeledSample(int(self.train_ids[row]), self.train_x[row],
                             int(self.train_y[row]), TIER_NAMES[self.train_tier[row]])


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Named, splittable, counter-based stream (Philox under a spawn key)."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))
    )


def generate(config: GenConfig) -> SynthDataset:
    """Deterministic dataset + open-set evaluation split for a config."""
    if config.num_classes < MIN_CLASSES:
        raise ConfigError(
            f"data.num_classes must be >= {MIN_CLASSES} to reserve evaluation "
            f"classes, got {config.num_classes}"
        )
    n_easy = int(config.easy_fraction * config.samples_per_class)
    if n_easy < 1:
        raise ConfigError(
            "data.easy_fraction leaves no easy sample per class; the gallery "
            "needs at least one"
        )
    # At least two held-out classes, else impostor pairs cannot exist.
    n_eval_classes = max(2, int(EVAL_CLASS_FRACTION * config.num_classes))
    n_train_classes = config.num_classes - n_eval_classes

    rng_proto = stream_rng(config.seed, _STREAM_PROTOTYPES)
    rng_noise = stream_rng(config.seed, _STREAM_NOISE)
    rng_pairs = stream_rng(config.seed, _STREAM_PAIRS)

    prototypes, _ = unit_rows(
        rng_proto.standard_normal((config.num_classes, config.input_dim))
    )

    spc = config.samples_per_class
    sigmas = np.full(spc, config.hard_noise)
    sigmas[:n_easy] = config.easy_noise
    tiers = np.full(spc, TIER_HARD, dtype=np.uint8)
    tiers[:n_easy] = TIER_EASY

    xs, ys, tier_all = [], [], []
    for cls in range(config.num_classes):
        noise = rng_noise.standard_normal((spc, config.input_dim))
        sampled, _ = unit_rows(prototypes[cls] + sigmas[:, None] * noise)
        xs.append(sampled)
        ys.append(np.full(spc, cls, dtype=np.uint32))
        tier_all.append(tiers.copy())
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    tier = np.concatenate(tier_all)
    ids = np.arange(len(x), dtype=np.int64)

    train_mask = y < n_train_classes
    dataset = SynthDataset(
        config=config,
        prototypes=prototypes,
        train_ids=ids[train_mask],
        train_x=np.ascontiguousarray(x[train_mask]),
        train_y=y[train_mask],
        train_tier=tier[train_mask],
        eval_ids=ids[~train_mask],
        eval_x=np.ascontiguousarray(x[~train_mask]),
        eval_y=y[~train_mask],
        eval_tier=tier[~train_mask],
        split=None,
    )
    dataset.split = _build_split(dataset, rng_pairs)
    return dataset


def _build_split(ds: SynthDataset, rng: np.random.Generator) -> EvalSplit:
    eval_classes = np.unique(ds.eval_y)

    gallery = []
    for cls in eval_classes:
        easy_rows = np.flatnonzero((ds.eval_y == cls) & (ds.eval_tier == TIER_EASY))
        gallery.append(ds.eval_ids[easy_rows[0]])  # lowest-id easy sample
    probe_rows = np.flatnonzero(ds.eval_tier == TIER_HARD)

    # All same-class pairs (row index order), subsampled to the cap.
    pos_a, pos_b = [], []
    for cls in eval_classes:
        rows = np.flatnonzero(ds.eval_y == cls)
        ia, ib = np.triu_indices(len(rows), k=1)
        pos_a.append(rows[ia])
        pos_b.append(rows[ib])
    pos_a = np.concatenate(pos_a)
    pos_b = np.concatenate(pos_b)
    if len(pos_a) > POSITIVE_PAIR_CAP:
        keep = np.sort(rng.choice(len(pos_a), size=POSITIVE_PAIR_CAP, replace=False))
        pos_a, pos_b = pos_a[keep], pos_b[keep]

    n_eval = len(ds.eval_ids)
    class_sizes = np.bincount(ds.eval_y - ds.eval_y.min())
    possible_cross = (n_eval * n_eval - int(np.sum(class_sizes ** 2))) // 2
    if possible_cross < len(pos_a):
        raise ConfigError(
            f"cannot draw {len(pos_a)} impostor pairs: only {possible_cross} "
            "cross-class pairs exist among held-out samples"
        )
    neg_a, neg_b, seen = [], [], set()
    while len(neg_a) < len(pos_a):
        i, j = rng.integers(0, n_eval, size=2)
        if ds.eval_y[i] == ds.eval_y[j]:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        neg_a.append(i)
        neg_b.append(j)
    neg_a = np.array(neg_a, dtype=np.int64)
    neg_b = np.array(neg_b, dtype=np.int64)

    a = np.concatenate([pos_a, neg_a])
    b = np.concatenate([pos_b, neg_b])
    same = np.zeros(len(a), dtype=bool)
    same[: len(pos_a)] = True
    tag = (ds.eval_tier[a].astype(np.uint8) + ds.eval_tier[b]).astype(np.uint8)
    return EvalSplit(
        pair_a=ds.eval_ids[a],
        pair_b=ds.eval_ids[b],
        pair_same=same,
        pair_tag=tag,
        gallery_ids=np.array(gallery, dtype=np.int64),
        probe_ids=ds.eval_ids[probe_rows],
    )


# ---------------------------------------------------------------------------
# Binary persistence (little-endian, fixed layout, truncation-checked).

_HEADER = struct.Struct("<III d d d Q IIIII")


def save_dataset(path, ds: SynthDataset) -> None:
    cfg = ds.config
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += _HEADER.pack(
        cfg.num_classes, cfg.samples_per_class, cfg.input_dim,
        cfg.easy_fraction, cfg.easy_noise, cfg.hard_noise, cfg.seed,
        len(ds.train_ids), len(ds.eval_ids), len(ds.split.pair_a),
        len(ds.split.gallery_ids), len(ds.split.probe_ids),
    )
    for arr, dtype in _array_layout(ds):
        blob += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    Path(path).write_bytes(bytes(blob))


def _array_layout(ds: SynthDataset):
    s = ds.split
    return [
        (ds.prototypes, "<f8"),
        (ds.train_ids, "<i8"), (ds.train_x, "<f8"), (ds.train_y, "<u4"), (ds.train_tier, "u1"),
        (ds.eval_ids, "<i8"), (ds.eval_x, "<f8"), (ds.eval_y, "<u4"), (ds.eval_tier, "u1"),
        (s.pair_a, "<i8"), (s.pair_b, "<i8"), (s.pair_same, "u1"), (s.pair_tag, "u1"),
        (s.gallery_ids, "<i8"), (s.probe_ids, "<i8"),
    ]


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.buf):
            raise DataFormatError(
                f"truncated dataset file: needed {n} bytes at offset {self.offset}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.offset:self.offset + n]
        self.offset += n
        return out

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(dt.itemsize * n)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def load_dataset(path) -> SynthDataset:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r} at offset 0; not a dataset file")
    (version,) = struct.unpack("<I", r.take(4))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"dataset format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    fields = _HEADER.unpack(r.take(_HEADER.size))
    (num_classes, spc, dim, easy_fraction, easy_noise, hard_noise, seed,
     n_train, n_eval, n_pairs, n_gallery, n_probes) = fields
    cfg = GenConfig(num_classes=num_classes, samples_per_class=spc, input_dim=dim,
                    easy_fraction=easy_fraction, easy_noise=easy_noise,
                    hard_noise=hard_noise, seed=seed)

    prototypes = r.array("<f8", (num_classes, dim))
    train_ids = r.array("<i8", (n_train,))
    train_x = r.array("<f8", (n_train, dim))
    train_y = r.array("<u4", (n_train,))
    train_tier = r.array("u1", (n_train,))
    eval_ids = r.array("<i8", (n_eval,))
    eval_x = r.array("<f8", (n_eval, dim))
    eval_y = r.array("<u4", (n_eval,))
    eval_tier = r.array("u1", (n_eval,))
    pair_a = r.array("<i8", (n_pairs,))
    pair_b = r.array("<i8", (n_pairs,))
    pair_same = r.array("u1", (n_pairs,)).astype(bool)
    pair_tag = r.array("u1", (n_pairs,))
    gallery_ids = r.array("<i8", (n_gallery,))
    probe_ids = r.array("<i8", (n_probes,))
    if r.offset != len(buf):
        raise DataFormatError(
            f"trailing data: expected end of file at offset {r.offset}, "
            f"file has {len(buf)} bytes"
        )
    return SynthDataset(
        config=cfg, prototypes=prototypes,
        train_ids=train_ids, train_x=train_x, train_y=train_y, train_tier=train_tier,
        eval_ids=eval_ids, eval_x=eval_x, eval_y=eval_y, eval_tier=eval_tier,
        split=EvalSplit(pair_a=pair_a, pair_b=pair_b, pair_same=pair_same,
                        pair_tag=pair_tag, gallery_ids=gallery_ids, probe_ids=probe_ids),
    )


def export_samples_csv(path, ds: SynthDataset) -> None:
    """Inspection CSV: sample_id,class_id,tier,v0..v{dim-1} for every sample."""
    dim = ds.config.input_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_id", "tier"] + [f"v{i}" for i in range(dim)])
        for ids, xs, ys, tiers in ((ds.train_ids, ds.train_x, ds.train_y, ds.train_tier),
                                   (ds.eval_ids, ds.eval_x, ds.eval_y, ds.eval_tier)):
            for k in range(len(ids)):
                writer.writerow(
                    [int(ids[k]), int(ys[k]), TIER_NAMES[tiers[k]]]
                    + [format(v, ".17g") for v in xs[k]]
                )
