"""Synthetic datasets, deterministic augmentation streams, and dataset files.

Augmentation stands in for an image pipeline: multiplicative scale jitter,
additive Gaussian noise, then coordinate masking.  Views of one instance are
noisy observations of a shared latent, which is the structural property the
losses rely on.

All randomness is counter-based (Philox keyed streams): the stream for any
(seed, path) is a pure function, so augmentation is reproducible regardless
of scheduling and every view has its own substream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError, ShapeError

_MASK64 = (1 << 64) - 1
_LDSET_MAGIC = b"LDSET"
_LDSET_VERSION = 1


def _mix64(h: int, v: int) -> int:
    """One splitmix64 step folding ``v`` into hash state ``h``."""
    h = (h + 0x9E3779B97F4A7C15 + v) & _MASK64
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
    return h ^ (h >> 31)


@dataclass(frozen=True)
class StreamKey:
    """Address of one deterministic random stream: a seed plus an int path."""

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *ids: int) -> "StreamKey":
        return StreamKey(self.seed, self.path + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        h = 0
        for p in self.path:
            h = _mix64(h, p & _MASK64)
        key = [np.uint64(self.seed & _MASK64), np.uint64(h)]
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class AugmentPolicy:
    """Stochastic view transform: scale jitter, noise, coordinate masking."""

    noise_sigma: float = 0.05
    mask_frac: float = 0.1
    scale_lo: float = 0.9
    scale_hi: float = 1.1

    def __post_init__(self):
        if not 0.0 <= self.mask_frac <= 1.0:
            raise ConfigError(f"mask_frac must lie in [0, 1], got {self.mask_frac}")
        if self.scale_lo > self.scale_hi:
            raise ConfigError(f"scale range [{self.scale_lo}, {self.scale_hi}] is empty")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(noise_sigma=0.0, mask_frac=0.0, scale_lo=1.0, scale_hi=1.0)


@dataclass
class Dataset:
    """Samples with labels; labels are for evaluation only, never pre-training."""

    samples: np.ndarray          # (n, d_in) float64
    labels: np.ndarray           # (n,) int64 class ids
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d_in(self) -> int:
        return self.samples.shape[1]


def gen_synthetic(n_classes: int, per_class: int, d_in: int, spread: float,
                  seed: int, min_angle_deg: float = 45.0,
                  max_retries: int = 1000) -> Dataset:
    """Gaussian blobs around well-separated unit-norm class means.

    Means are drawn uniformly on the sphere and rejected until every pair is
    at least ``min_angle_deg`` apart; samples are mean + N(0, spread^2) per
    coordinate.  Fully determined by the arguments.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if per_class < 1:
        raise ConfigError(f"need at least 1 sample per class, got {per_class}")
    if spread <= 0.0:
        raise ConfigError(f"spread must be positive, got {spread}")
    rng = StreamKey(seed).child(0xDA7A).generator()
    cos_max = np.cos(np.deg2rad(min_angle_deg))
    means = np.zeros((n_classes, d_in))
    for c in range(n_classes):
        for attempt in range(max_retries + 1):
            v = rng.normal(size=d_in)
            v /= np.sqrt(v @ v)
            if c == 0 or (means[:c] @ v).max() <= cos_max:
                means[c] = v
                break
        else:
            raise GenerationError(
                f"could not place class mean {c} with pairwise angle >= "
                f"{min_angle_deg} deg after {max_retries} retries")
    samples = np.repeat(means, per_class, axis=0)
    samples = samples + rng.normal(0.0, spread, size=samples.shape)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    meta = {
        "generator": "gen_synthetic",
        "n_classes": n_classes,
        "per_class": per_class,
        "d_in": d_in,
        "spread": spread,
        "seed": seed,
        "min_angle_deg": min_angle_deg,
    }
    return Dataset(samples=samples, labels=labels, meta=meta)


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of ``x``: scale jitter, additive noise, masking.

    Consumes a fixed number of draws from ``rng`` regardless of the policy,
    so streams stay aligned across policy settings.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    scale = rng.uniform(policy.scale_lo, policy.scale_hi)
    y = x * scale
    y = y + rng.normal(0.0, policy.noise_sigma, size=d)
    mask = rng.random(d) < policy.mask_frac
    return np.where(mask, 0.0, y)


def make_views(x: np.ndarray, m: int, policy: AugmentPolicy,
               stream: StreamKey) -> tuple[np.ndarray, np.ndarray]:
    """M independent views of one instance: (M-1, d) queries plus one key.

    Each view has its own substream, so view v is the same no matter what M
    is; the key view's stream is disjoint from every query stream.
    """
    if m < 2:
        raise ShapeError(f"need at least 2 views, got {m}")
    x = np.asarray(x, dtype=np.float64)
    queries = np.empty((m - 1, x.shape[-1]))
    for v in range(m - 1):
        queries[v] = augment(x, policy, stream.child(0, v).generator())
    key = augment(x, policy, stream.child(1, 0).generator())
    return queries, key


def save_dataset(path, ds: Dataset) -> None:
    """Write the little-endian binary dataset format.

    Layout: magic "LDSET", u32 version, u64 n, u64 d_in, n*d_in float32
    samples row-major, n u32 labels.
    """
    path = Path(path)
    samples = np.ascontiguousarray(ds.samples, dtype="<f4")
    labels = np.ascontiguousarray(ds.labels, dtype="<u4")
    with open(path, "wb") as f:
        f.write(_LDSET_MAGIC)
        f.write(struct.pack("<I", _LDSET_VERSION))
        f.write(struct.pack("<QQ", ds.n, ds.d_in))
        f.write(samples.tobytes())
        f.write(labels.tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != _LDSET_MAGIC:
        raise FormatError(f"{path}: bad dataset magic {raw[:5]!r}")
    (version,) = struct.unpack_from("<I", raw, 5)
    if version != _LDSET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    n, d_in = struct.unpack_from("<QQ", raw, 9)
    offset = 9 + 16
    nbytes = n * d_in * 4
    if len(raw) != offset + nbytes + n * 4:
        raise FormatError(f"{path}: truncated or oversized dataset file")
    samples = np.frombuffer(raw, dtype="<f4", count=n * d_in, offset=offset)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset + nbytes)
    return Dataset(
        samples=samples.reshape(n, d_in).astype(np.float64),
        labels=labels.astype(np.int64),
        meta={"source": str(path), "format": f"ldset-v{version}"},
    )
