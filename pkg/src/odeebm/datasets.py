"""Synthetic benchmark datasets: irregular sinusoids, 2-d spirals, damped
oscillators. Generation is deterministic per seed (each trajectory gets its
own spawned rng stream), and datasets round-trip bit-exactly through a
self-describing container: a JSON header followed by raw little-endian
float64 blocks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MAGIC = b"OEBMDS01"


class DataError(RuntimeError):
    """Bad dataset file, spec, or request."""


@dataclass
class TimeSeries:
    """One trajectory: strictly increasing times, values, observation mask."""

    id: str
    times: np.ndarray           # [T]
    values: np.ndarray          # [T, D]
    mask: np.ndarray            # [T] bool
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        t = self.times.shape[0]
        if self.values.shape[0] != t or self.mask.shape[0] != t:
            raise DataError(
                f"series {self.id}: lengths disagree "
                f"(times {t}, values {self.values.shape[0]}, mask {self.mask.shape[0]})"
            )
        if t > 1 and np.any(np.diff(self.times) <= 0):
            raise DataError(f"series {self.id}: times must be strictly increasing")

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class DatasetSpec:
    kind: str = "sinusoid"          # sinusoid | spiral2d | damped_osc
    n: int = 1000
    t_points: int = 100
    t_min: float = 0.0
    t_max: float = 5.0
    split: tuple = (0.8, 0.0, 0.2)  # train/val/test fractions
    counts: tuple | None = None     # explicit (train, val, test), overrides split
    noise_std: float = 0.0
    seed: int = 0
    # sinusoid
    freq_range: tuple = (0.5, 1.0)
    offset_mean: float = 1.0
    offset_std: float = 0.1
    shared_times: bool = False      # draw one time grid for all trajectories
    # spiral2d / damped_osc
    test_points: int = 0            # longer test sequences when > 0
    radius_range: tuple = (0.3, 0.7)
    radius_slope: float = 0.04      # dr per radian, keeps 500-step tests in [-3,3]^2
    omega: float = 1.0
    friction_range: tuple = (0.0, 0.1)

    def __post_init__(self):
        if self.kind not in ("sinusoid", "spiral2d", "damped_osc"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if self.counts is None and abs(sum(self.split) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {self.split}")
        if self.t_points < 2:
            raise DataError("need at least two time points per trajectory")

    def split_counts(self):
        if self.counts is not None:
            return tuple(int(c) for c in self.counts)
        n_train = int(round(self.split[0] * self.n))
        n_val = int(round(self.split[1] * self.n))
        return n_train, n_val, self.n - n_train - n_val


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list
    val: list
    test: list

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def sinusoid_value(freq, offset, t):
    """Unit-amplitude sinusoid with vertical offset: offset + sin(2 pi f t)."""
    return offset + np.sin(2.0 * np.pi * freq * np.asarray(t, dtype=np.float64))


def damped_value(gamma, omega, t):
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-gamma * t) * np.sin(omega * t)


def generate(spec: DatasetSpec) -> Dataset:
    gen = {"sinusoid": gen_sinusoid, "spiral2d": gen_spiral2d,
           "damped_osc": gen_damped_osc}[spec.kind]
    return gen(spec)


def _child_rngs(spec, total):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(total)]


def _partition(series, counts):
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test != len(series):
        raise DataError("split counts do not cover the dataset")
    return (series[:n_train],
            series[n_train:n_train + n_val],
            series[n_train + n_val:])


def gen_sinusoid(spec: DatasetSpec) -> Dataset:
    """Irregularly sampled sinusoids: per-trajectory uniform times in
    [t_min, t_max], frequency from freq_range, vertical offset from
    N(offset_mean, offset_std^2)."""
    counts = spec.split_counts()
    total = sum(counts)
    rngs = _child_rngs(spec, total + 1)
    shared = np.sort(rngs[-1].uniform(spec.t_min, spec.t_max, spec.t_points))
    series = []
    for i, rng in enumerate(rngs[:total]):
        times = shared if spec.shared_times else np.sort(
            rng.uniform(spec.t_min, spec.t_max, spec.t_points))
        freq = rng.uniform(*spec.freq_range)
        offset = rng.normal(spec.offset_mean, spec.offset_std)
        vals = sinusoid_value(freq, offset, times)
        if spec.noise_std > 0:
            vals = vals + rng.normal(0.0, spec.noise_std, vals.shape)
        series.append(TimeSeries(
            id=f"sin-{i:04d}", times=times, values=vals,
            mask=np.ones(spec.t_points, dtype=bool),
            metadata={"freq": float(freq), "offset": float(offset)},
        ))
    return Dataset(spec, *_partition(series, counts))


def gen_spiral2d(spec: DatasetSpec) -> Dataset:
    """Archimedean spirals r = a + slope * theta on a regular grid, half of
    them clockwise. Test sequences run test_points steps (default 5x the
    training length) so extrapolation quality is measurable."""
    counts = spec.counts if spec.counts is not None else (1000, 1000, 200)
    counts = tuple(int(c) for c in counts)
    total = sum(counts)
    test_points = spec.test_points or 5 * spec.t_points
    dt = (spec.t_max - spec.t_min) / spec.t_points
    rngs = _child_rngs(spec, total)
    series = []
    n_trainval = counts[0] + counts[1]
    for i, rng in enumerate(rngs):
        n_pts = spec.t_points if i < n_trainval else test_points
        times = spec.t_min + dt * np.arange(n_pts)
        a = rng.uniform(*spec.radius_range)
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        theta = direction * spec.omega * times
        r = a + spec.radius_slope * spec.omega * times
        vals = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        if spec.noise_std > 0:
            vals = vals + rng.normal(0.0, spec.noise_std, vals.shape)
        series.append(TimeSeries(
            id=f"spiral-{i:04d}", times=times, values=vals,
            mask=np.ones(n_pts, dtype=bool),
            metadata={"a": float(a), "direction": float(direction)},
        ))
    return Dataset(spec, *_partition(series, counts))


def gen_damped_osc(spec: DatasetSpec) -> Dataset:
    """Scalar damped oscillations exp(-gamma t) sin(omega t) on a regular
    grid; the friction gamma is stored as ground truth for recovery tests.
    Test sequences run test_points steps (default 2x)."""
    counts = spec.split_counts()
    total = sum(counts)
    test_points = spec.test_points or 2 * spec.t_points
    dt = (spec.t_max - spec.t_min) / spec.t_points
    rngs = _child_rngs(spec, total)
    series = []
    n_trainval = counts[0] + counts[1]
    for i, rng in enumerate(rngs):
        n_pts = spec.t_points if i < n_trainval else test_points
        times = spec.t_min + dt * np.arange(n_pts)
        gamma = rng.uniform(*spec.friction_range)
        vals = damped_value(gamma, spec.omega, times)
        if spec.noise_std > 0:
            vals = vals + rng.normal(0.0, spec.noise_std, vals.shape)
        series.append(TimeSeries(
            id=f"osc-{i:04d}", times=times, values=vals,
            mask=np.ones(n_pts, dtype=bool),
            metadata={"friction": float(gamma)},
        ))
    return Dataset(spec, *_partition(series, counts))


def subsample(ts: TimeSeries, ratio: float, seed) -> np.ndarray:
    """Conditioning mask with exactly round(ratio * T) observed points drawn
    uniformly without replacement; deterministic per seed."""
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"observation ratio must be in (0, 1], got {ratio}")
    t = ts.times.shape[0]
    k = max(1, int(round(ratio * t)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(t, size=k, replace=False)
    mask = np.zeros(t, dtype=bool)
    mask[idx] = True
    return mask


def first_k_mask(ts: TimeSeries, k: int) -> np.ndarray:
    mask = np.zeros(ts.times.shape[0], dtype=bool)
    mask[: min(k, mask.size)] = True
    return mask


def stack_series(series):
    """Stack same-length series into (times [B,T], values [B,T,D], mask [B,T])."""
    lengths = {s.times.shape[0] for s in series}
    if len(lengths) != 1:
        raise DataError(f"cannot stack series of different lengths: {sorted(lengths)}")
    times = np.stack([s.times for s in series])
    values = np.stack([s.values for s in series])
    mask = np.stack([s.mask for s in series])
    return times, values, mask


# ---------------------------------------------------------------------------
# container format: magic, uint64 header length, JSON header, float64 blocks.
# Per series the blocks are times [T], values [T*D], mask [T] (0.0/1.0), in
# split order train, val, test. Field order inside the header is documented
# in FORMATS.md.

def save(dataset: Dataset, path) -> None:
    path = Path(path)
    spec_dict = asdict(dataset.spec)
    for key in ("split", "counts", "freq_range", "radius_range", "friction_range"):
        if spec_dict[key] is not None:
            spec_dict[key] = list(spec_dict[key])
    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec_dict,
        "splits": {
            name: [
                {"id": s.id, "n_points": int(s.times.shape[0]), "dim": int(s.dim),
                 "metadata": s.metadata}
                for s in dataset.split(name)
            ]
            for name in ("train", "val", "test")
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for name in ("train", "val", "test"):
            for s in dataset.split(name):
                fh.write(s.times.astype("<f8").tobytes())
                fh.write(s.values.astype("<f8").tobytes())
                fh.write(s.mask.astype("<f8").tobytes())


def load(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataError(f"{path}: not a dataset container")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise DataError(
                f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
            )
        spec_dict = dict(header["spec"])
        for key in ("split", "counts", "freq_range", "radius_range", "friction_range"):
            if spec_dict.get(key) is not None:
                spec_dict[key] = tuple(spec_dict[key])
        spec = DatasetSpec(**spec_dict)
        splits = {}
        for name in ("train", "val", "test"):
            out = []
            for meta in header["splits"][name]:
                t, d = meta["n_points"], meta["dim"]
                times = np.frombuffer(fh.read(8 * t), dtype="<f8").copy()
                values = np.frombuffer(fh.read(8 * t * d), dtype="<f8").reshape(t, d).copy()
                mask = np.frombuffer(fh.read(8 * t), dtype="<f8") != 0.0
                out.append(TimeSeries(meta["id"], times, values, mask, meta["metadata"]))
            splits[name] = out
    return Dataset(spec, splits["train"], splits["val"], splits["test"])
