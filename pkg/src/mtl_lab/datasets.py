"""Scenario sampling and supervised dataset plumbing.

A sample is one simulated scene: the RSS vector measured by the sensor grid,
the number of active transmitters, and their coordinates in a canonical
(lexicographic) order so that a permutation of the same physical scene always
yields the same regression target.
"""

from dataclasses import dataclass, field

import numpy as np

from .propagation import (PropagationParams, SensorLayout, TransmitterSet,
                          received_power, sample_shadowing, shadowing_covariance)
from .streams import seed_sequence


class DatasetFormatError(ValueError):
    """Raised on malformed dataset files; message carries the 1-based line."""


@dataclass(frozen=True)
class Sample:
    rss: np.ndarray        # (N_s,) dB
    tx_count: int
    coords: np.ndarray     # (2 * tx_count,) flat [x1, y1, x2, y2, ...], ordered

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.tx_count == other.tx_count
                and np.array_equal(self.rss, other.rss)
                and np.array_equal(self.coords, other.coords))


@dataclass
class Dataset:
    layout: SensorLayout
    params: PropagationParams
    samples: list

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.layout == other.layout
                and self.params == other.params and self.samples == other.samples)

    def rss_matrix(self) -> np.ndarray:
        return np.array([s.rss for s in self.samples])

    def counts(self) -> np.ndarray:
        return np.array([s.tx_count for s in self.samples], dtype=int)

    def coord_matrix(self) -> np.ndarray:
        """Stacked flat coordinates; only valid when all samples share tx_count."""
        widths = {len(s.coords) for s in self.samples}
        if len(widths) > 1:
            raise ValueError("coord_matrix needs a single-tx-count dataset")
        return np.array([s.coords for s in self.samples])

    def subset(self, tx_count: int) -> "Dataset":
        kept = [s for s in self.samples if s.tx_count == tx_count]
        return Dataset(self.layout, self.params, kept)


@dataclass(frozen=True)
class GenConfig:
    """What to simulate: per-class sample counts under one layout/channel."""

    layout: SensorLayout
    params: PropagationParams
    samples_per_count: int
    nt_max: int = 4

    def __post_init__(self):
        if self.samples_per_count < 0:
            raise ValueError("samples_per_count must be >= 0")
        if self.nt_max < 1:
            raise ValueError("nt_max must be >= 1")


def sample_scenario(n_t: int, area_width: float, area_height: float,
                    rng: np.random.Generator) -> TransmitterSet:
    """n_t transmitter positions drawn i.i.d. uniform over the area."""
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    xy = rng.uniform(0.0, 1.0, size=(n_t, 2)) * np.array([area_width, area_height])
    return TransmitterSet(xy)


def order_labels(coords: np.ndarray) -> np.ndarray:
    """Canonical transmitter order: ascending x, ties broken by ascending y."""
    pts = np.atleast_2d(np.asarray(coords, dtype=float))
    if pts.shape[0] < 1:
        raise ValueError("order_labels needs at least one point")
    idx = np.lexsort((pts[:, 1], pts[:, 0]))
    return pts[idx]


def generate_dataset(config: GenConfig, seed) -> Dataset:
    """Simulate ``samples_per_count`` scenes for every count 1..nt_max.

    ``seed`` is an int or anything streams.seed_sequence accepts as base; each
    sample gets its own deterministic sub-stream keyed by (count, index), so
    generation order (or parallelism) cannot change the data.
    """
    layout, params = config.layout, config.params
    shadow = shadowing_covariance(layout, params.shadow_variance_db, params.decorrelation_m)
    samples = []
    for nt in range(1, config.nt_max + 1):
        for i in range(config.samples_per_count):
            rng = np.random.Generator(np.random.PCG64(seed_sequence(seed, nt, i)))
            txs = sample_scenario(nt, layout.area_width, layout.area_height, rng)
            noise = np.array([sample_shadowing(shadow, rng) for _ in range(nt)])
            rss = received_power(txs, layout, params, noise)
            coords = order_labels(txs.coords).ravel()
            samples.append(Sample(rss=rss, tx_count=nt, coords=coords))
    return Dataset(layout, params, samples)


def split_train_val(dataset: Dataset, fraction: float, seed: int = 0):
    """Deterministic shuffled split, stratified by tx_count.

    fraction is the training share; per class the training size is
    round(fraction * n_class), so each class ratio is within one sample of
    the requested split.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    if len(dataset) < 2:
        raise ValueError("need at least 2 samples to split")
    train_idx, val_idx = [], []
    counts = dataset.counts()
    for nt in np.unique(counts):
        idx = np.flatnonzero(counts == nt)
        rng = np.random.Generator(np.random.PCG64(seed_sequence(seed, "split", int(nt))))
        rng.shuffle(idx)
        n_train = int(round(fraction * len(idx)))
        train_idx.extend(idx[:n_train])
        val_idx.extend(idx[n_train:])
    train = Dataset(dataset.layout, dataset.params,
                    [dataset.samples[i] for i in sorted(train_idx)])
    val = Dataset(dataset.layout, dataset.params,
                  [dataset.samples[i] for i in sorted(val_idx)])
    return train, val


@dataclass(frozen=True)
class Normalizer:
    """Per-sensor feature z-scoring and per-axis coordinate scaling to [0, 1].

    Sensors with zero variance in the training set are only centered (their
    stored std is 1). Targets are divided by the area extents; the inverse
    transform returns meters.
    """

    feat_mean: np.ndarray
    feat_std: np.ndarray
    area_width: float
    area_height: float

    def normalize_features(self, rss: np.ndarray) -> np.ndarray:
        return (rss - self.feat_mean) / self.feat_std

    def normalize_targets(self, coords: np.ndarray) -> np.ndarray:
        scale = np.tile([self.area_width, self.area_height], coords.shape[-1] // 2)
        return coords / scale

    def invert_targets(self, scaled: np.ndarray) -> np.ndarray:
        scale = np.tile([self.area_width, self.area_height], scaled.shape[-1] // 2)
        return scaled * scale

    def encode(self) -> str:
        mean = ",".join(f"{v:.17g}" for v in self.feat_mean)
        std = ",".join(f"{v:.17g}" for v in self.feat_std)
        return f"mean:{mean};std:{std};area:{self.area_width:.17g},{self.area_height:.17g}"

    @staticmethod
    def decode(text: str) -> "Normalizer":
        fields = dict(part.split(":", 1) for part in text.strip().split(";"))
        mean = np.array([float(v) for v in fields["mean"].split(",")])
        std = np.array([float(v) for v in fields["std"].split(",")])
        aw, ah = (float(v) for v in fields["area"].split(","))
        return Normalizer(mean, std, aw, ah)


def fit_normalizer(train: Dataset) -> Normalizer:
    """Feature statistics from the training portion only."""
    if len(train) == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    rss = train.rss_matrix()
    mean = rss.mean(axis=0)
    std = rss.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return Normalizer(mean, std, train.layout.area_width, train.layout.area_height)


def write_dataset(dataset: Dataset, path, comment: str | None = None) -> None:
    """Plain-text dataset file; see read_dataset for the exact grammar.

    comment, when given, is emitted as leading '#' lines (provenance stamp);
    the reader skips them.
    """
    p = dataset.params
    lines = []
    if comment:
        lines.extend("# " + c if not c.startswith("#") else c
                     for c in comment.splitlines())
    lines += [
        f"ns={dataset.layout.n_sensors}",
        f"area={dataset.layout.area_width:.17g}x{dataset.layout.area_height:.17g}",
        f"beta={p.path_loss_exponent:.17g}",
        f"sigma2={p.shadow_variance_db:.17g}",
        f"dc={p.decorrelation_m:.17g}",
        f"p0={p.ref_power_db:.17g}",
        f"d0={p.ref_distance:.17g}",
    ]
    for x, y in dataset.layout.positions:
        lines.append(f"{x:.17g} {y:.17g}")
    lines.append("")
    for s in dataset.samples:
        rss = ",".join(f"{v:.17g}" for v in s.rss)
        coords = ",".join(f"{v:.17g}" for v in s.coords)
        lines.append(f"{s.tx_count};{rss};{coords}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _header_value(lines, lineno: int, key: str, offset: int = 0) -> str:
    shown = lineno + offset
    if lineno > len(lines):
        raise DatasetFormatError(f"line {shown}: missing header '{key}' (truncated file)")
    text = lines[lineno - 1]
    if not text.startswith(key + "="):
        raise DatasetFormatError(f"line {shown}: expected header '{key}=', got '{text}'")
    return text[len(key) + 1:]


def read_dataset(path) -> Dataset:
    """Parse a dataset file written by write_dataset.

    Grammar: seven ``key=value`` header lines (ns, area, beta, sigma2, dc, p0,
    d0), then ns lines of sensor ``x y`` pairs, a blank separator line, and one
    record per line: ``nt;P_1,...,P_Ns;x1,y1,...,x_nt,y_nt``. Raises
    DatasetFormatError naming the offending 1-based line.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    skipped = 0
    while skipped < len(raw) and raw[skipped].startswith("#"):
        skipped += 1
    lines = raw[skipped:]

    def fail(lineno, msg):
        raise DatasetFormatError(f"line {lineno + skipped}: {msg}")

    try:
        ns = int(_header_value(lines, 1, "ns", skipped))
        area = _header_value(lines, 2, "area", skipped)
        beta = float(_header_value(lines, 3, "beta", skipped))
        sigma2 = float(_header_value(lines, 4, "sigma2", skipped))
        dc = float(_header_value(lines, 5, "dc", skipped))
        p0 = float(_header_value(lines, 6, "p0", skipped))
        d0 = float(_header_value(lines, 7, "d0", skipped))
    except ValueError as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"lines 1-7: malformed header ({exc})") from None
    if "x" not in area:
        fail(2, "area must be '<width>x<height>'")
    area_w, area_h = (float(v) for v in area.split("x", 1))

    sensor_rows = []
    for j in range(ns):
        lineno = 8 + j
        if lineno > len(lines):
            fail(lineno, "missing sensor coordinate block (truncated file)")
        parts = lines[lineno - 1].split()
        if len(parts) != 2:
            fail(lineno, f"expected 'x y' sensor coordinates, got '{lines[lineno - 1]}'")
        try:
            sensor_rows.append([float(parts[0]), float(parts[1])])
        except ValueError:
            fail(lineno, f"non-numeric sensor coordinate '{lines[lineno - 1]}'")
    blank_lineno = 8 + ns
    if blank_lineno > len(lines):
        fail(blank_lineno, "missing blank separator before records (truncated file)")
    if lines[blank_lineno - 1].strip() != "":
        fail(blank_lineno, "expected blank separator line before records")

    layout = SensorLayout(np.array(sensor_rows), area_w, area_h)
    params = PropagationParams(ref_power_db=p0, ref_distance=d0, path_loss_exponent=beta,
                               shadow_variance_db=sigma2, decorrelation_m=dc)
    samples = []
    for k, text in enumerate(lines[blank_lineno:]):
        lineno = blank_lineno + 1 + k
        if text.strip() == "":
            continue
        parts = text.split(";")
        if len(parts) != 3:
            fail(lineno, "record must have three ';'-separated fields")
        try:
            nt = int(parts[0])
            rss = np.array([float(v) for v in parts[1].split(",")])
            coords = np.array([float(v) for v in parts[2].split(",")])
        except ValueError:
            fail(lineno, "non-numeric value in record")
        if nt < 1:
            fail(lineno, f"tx count must be >= 1, got {nt}")
        if rss.shape[0] != ns:
            fail(lineno, f"expected {ns} RSS values, got {rss.shape[0]}")
        if coords.shape[0] != 2 * nt:
            fail(lineno, f"expected {2 * nt} coordinate values, got {coords.shape[0]}")
        if not (np.all(np.isfinite(rss)) and np.all(np.isfinite(coords))):
            fail(lineno, "non-finite value in record")
        samples.append(Sample(rss=rss, tx_count=nt, coords=coords))
    return Dataset(layout, params, samples)
