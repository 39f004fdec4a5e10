"""Metrics and experiment logic for the localization study.

Localization error is the Euclidean distance between a true transmitter and
the estimate assigned to it by a minimum-total-cost one-to-one matching.
When the estimate count differs from the truth (REML is blind to it, the
two-stage scheme can misclassify), min(|truth|, |estimates|) pairs are
matched and the leftover truths are counted separately; only matched errors
enter CDFs and RMSE values.
"""

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from . import mlp
from .datasets import Dataset, GenConfig, fit_normalizer, generate_dataset, split_train_val
from .particlesim import PsParams, ps_run_batch
from .propagation import (PropagationParams, SensorLayout, TransmitterSet,
                          grid_layout)
from .reml import RemBuilder, RadioMap, localize_multi
from .streams import stream

_PERM_CACHE = {}


def _permutations(n: int, k: int) -> np.ndarray:
    key = (n, k)
    if key not in _PERM_CACHE:
        _PERM_CACHE[key] = np.array(list(itertools.permutations(range(n), k)),
                                    dtype=int).reshape(-1, k)
    return _PERM_CACHE[key]


@dataclass
class MatchResult:
    pairs: list                 # (truth_index, estimate_index)
    errors: np.ndarray          # matched distances, meters
    unmatched_truth: int

    @property
    def total_cost(self) -> float:
        return float(self.errors.sum())


def _as_points(obj) -> np.ndarray:
    if obj is None:
        return np.empty((0, 2))
    if isinstance(obj, TransmitterSet):
        return obj.coords
    return np.atleast_2d(np.asarray(obj, dtype=float))


def match_estimates(truth, estimates) -> MatchResult:
    """Optimal assignment of estimates to truths by exhaustive search.

    Matches k = min(|truth|, |estimates|) pairs minimizing total Euclidean
    cost. Candidate columns are pruned to the union of each row's k cheapest
    (an exchange argument shows some optimal assignment lives there), which
    keeps the enumeration tiny even if a segmenter returns many regions.
    """
    t = _as_points(truth)
    e = _as_points(estimates)
    n, m = len(t), len(e)
    k = min(n, m)
    if k == 0:
        return MatchResult(pairs=[], errors=np.empty(0), unmatched_truth=n)
    cost = cdist(t, e)
    transposed = n > m
    if transposed:
        cost = cost.T
    rows, cols = cost.shape
    if cols > rows:
        cand = np.unique(np.argsort(cost, axis=1, kind="stable")[:, :rows])
        cost_sub = cost[:, cand]
    else:
        cand = np.arange(cols)
        cost_sub = cost
    perms = _permutations(len(cand), rows)
    totals = cost_sub[np.arange(rows)[None, :], perms].sum(axis=1)
    best = perms[int(np.argmin(totals))]
    col_idx = cand[best]
    if transposed:
        pairs = [(int(c), int(r)) for r, c in enumerate(col_idx)]
    else:
        pairs = [(int(r), int(c)) for r, c in enumerate(col_idx)]
    pairs.sort()
    errors = np.array([np.linalg.norm(t[ti] - e[ei]) for ti, ei in pairs])
    return MatchResult(pairs=pairs, errors=errors, unmatched_truth=n - k)


def error_cdf(errors) -> np.ndarray:
    """Empirical CDF: column 0 sorted errors, column 1 F at those points."""
    errors = np.sort(np.asarray(errors, dtype=float))
    if errors.size == 0:
        raise ValueError("error_cdf needs at least one error")
    return np.column_stack([errors, np.arange(1, errors.size + 1) / errors.size])


def cdf_at(errors, x: float) -> float:
    errors = np.asarray(errors, dtype=float)
    return float(np.mean(errors <= x))


def ks_distance(errors_a, errors_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic between error samples."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    grid = np.concatenate([a, b])
    fa = np.searchsorted(np.sort(a), grid, side="right") / a.size
    fb = np.searchsorted(np.sort(b), grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


@dataclass
class ConfusionReport:
    matrix: np.ndarray          # matrix[true - 1, pred - 1] counts
    precision: np.ndarray       # per predicted class; nan when never predicted
    recall: np.ndarray          # per true class; nan when class absent
    accuracy: float


def confusion(pred_counts, true_counts, n_classes: int) -> ConfusionReport:
    pred = np.asarray(pred_counts, dtype=int)
    true = np.asarray(true_counts, dtype=int)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lists differ in length")
    matrix = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(matrix, (true - 1, pred - 1), 1)
    diag = np.diag(matrix).astype(float)
    col = matrix.sum(axis=0)
    row = matrix.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, diag / col, np.nan)
        recall = np.where(row > 0, diag / row, np.nan)
    accuracy = float(diag.sum() / matrix.sum()) if matrix.sum() else float("nan")
    return ConfusionReport(matrix=matrix, precision=precision, recall=recall,
                           accuracy=accuracy)


@dataclass
class EvalReport:
    """Matched-error summary for one algorithm on one slice of the test set."""

    label: str
    matched_errors: np.ndarray
    unmatched_truth: int
    n_samples: int
    density: float | None = None

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.matched_errors ** 2)))

    @property
    def median(self) -> float:
        return float(np.median(self.matched_errors))

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.matched_errors, q))

    def cdf(self) -> np.ndarray:
        return error_cdf(self.matched_errors)


def summarize(label: str, per_sample_matches, n_samples: int,
              density: float | None = None) -> EvalReport:
    errors = [m.errors for m in per_sample_matches]
    unmatched = sum(m.unmatched_truth for m in per_sample_matches)
    return EvalReport(label=label,
                      matched_errors=np.concatenate(errors) if errors else np.empty(0),
                      unmatched_truth=unmatched, n_samples=n_samples, density=density)


def random_guess(area_width: float, area_height: float, n_t: int,
                 rng: np.random.Generator) -> TransmitterSet:
    """Uniform-position baseline; the upper bound for the positioning error."""
    xy = rng.uniform(0.0, 1.0, size=(n_t, 2)) * np.array([area_width, area_height])
    return TransmitterSet(xy)


def _truth_points(sample) -> np.ndarray:
    return sample.coords.reshape(-1, 2)


def eval_dl_oracle(regressors: dict, norm, test: Dataset) -> dict:
    """Per-true-count DL evaluation with the count known a priori."""
    reports = {}
    for nt, net in sorted(regressors.items()):
        sub = test.subset(nt)
        if not sub.samples:
            continue
        preds = mlp.predict_coordinates_batch(net, sub.rss_matrix(), norm)
        matches = [match_estimates(_truth_points(s), preds[i])
                   for i, s in enumerate(sub.samples)]
        reports[nt] = summarize(f"dl_oracle_nt{nt}", matches, len(sub.samples))
    return reports


def eval_dl_two_stage(classifier, regressors: dict, norm, test: Dataset):
    """Classifier picks the regressor per sample; reports grouped by true count.

    Returns (reports by true count, ConfusionReport, predicted counts).
    """
    rss = test.rss_matrix()
    true_counts = test.counts()
    pred_counts, _ = mlp.predict_count(classifier, rss, norm)
    n_classes = max(regressors)
    conf = confusion(pred_counts, true_counts, n_classes)
    estimates = [None] * len(test)
    for nt, net in regressors.items():
        idx = np.flatnonzero(pred_counts == nt)
        if idx.size == 0:
            continue
        preds = mlp.predict_coordinates_batch(net, rss[idx], norm)
        for j, i in enumerate(idx):
            estimates[i] = preds[j]
    reports = {}
    for nt in sorted(set(true_counts)):
        idx = np.flatnonzero(true_counts == nt)
        matches = [match_estimates(_truth_points(test.samples[i]), estimates[i])
                   for i in idx]
        reports[nt] = summarize(f"dl_twostage_nt{nt}", matches, idx.size)
    return reports, conf, pred_counts


def eval_reml(layout: SensorLayout, params: PropagationParams, resolution: float,
              test: Dataset, chunk: int = 256) -> dict:
    """REML evaluation; estimate count is whatever segmentation finds."""
    builder = RemBuilder(layout, params.shadow_variance_db, params.decorrelation_m,
                         resolution)
    true_counts = test.counts()
    matches_by_nt = {nt: [] for nt in sorted(set(true_counts))}
    rss = test.rss_matrix()
    for start in range(0, len(test), chunk):
        maps = builder.map_values(rss[start:start + chunk])
        for j in range(len(maps)):
            i = start + j
            rem = RadioMap(values=maps[j], resolution=resolution)
            est = localize_multi(rem, params.decorrelation_m)
            matches_by_nt[true_counts[i]].append(
                match_estimates(_truth_points(test.samples[i]), est))
    return {nt: summarize(f"reml_nt{nt}", ms,
                          int(np.sum(true_counts == nt)))
            for nt, ms in matches_by_nt.items() if ms}


def eval_ps(layout: SensorLayout, params: PropagationParams, ps_params: PsParams,
            test: Dataset, base_seed: int, known_counts: np.ndarray | None = None):
    """Particle-simulation evaluation; transmitter count and power are known.

    known_counts overrides the true per-sample counts (e.g. classifier output).
    """
    true_counts = test.counts()
    counts = true_counts if known_counts is None else np.asarray(known_counts, int)
    rss = test.rss_matrix()
    matches_by_nt = {nt: [] for nt in sorted(set(true_counts))}
    for nt in sorted(set(counts)):
        idx = np.flatnonzero(counts == nt)
        rngs = [stream(base_seed, "ps-init", int(i)) for i in idx]
        positions, _, _ = ps_run_batch(rss[idx], layout, int(nt), params, ps_params, rngs)
        for j, i in enumerate(idx):
            matches_by_nt[true_counts[i]].append(
                match_estimates(_truth_points(test.samples[i]), positions[j]))
    return {nt: summarize(f"ps_nt{nt}", ms, len(ms))
            for nt, ms in matches_by_nt.items() if ms}


def eval_rg(layout: SensorLayout, test: Dataset, base_seed: int) -> dict:
    """Random-guessing baseline at the true transmitter count."""
    true_counts = test.counts()
    matches_by_nt = {nt: [] for nt in sorted(set(true_counts))}
    for i, s in enumerate(test.samples):
        rng = stream(base_seed, "rg", i)
        guess = random_guess(layout.area_width, layout.area_height, s.tx_count, rng)
        matches_by_nt[s.tx_count].append(match_estimates(_truth_points(s), guess))
    return {nt: summarize(f"rg_nt{nt}", ms, len(ms))
            for nt, ms in matches_by_nt.items() if ms}


def rmse_matrix(regressors: dict, norm, test: Dataset) -> np.ndarray:
    """RMSE of model-n estimates against true-count-m labels, matrix[n-1, m-1].

    Matched pairs only; unmatched truths are excluded, mirroring the
    closest-coordinates reading of misclassified scenes.
    """
    n_max = max(regressors)
    out = np.full((n_max, n_max), np.nan)
    for m in range(1, n_max + 1):
        sub = test.subset(m)
        if not sub.samples:
            continue
        rss = sub.rss_matrix()
        truths = [_truth_points(s) for s in sub.samples]
        for n, net in regressors.items():
            preds = mlp.predict_coordinates_batch(net, rss, norm)
            sq = [match_estimates(truths[i], preds[i]).errors ** 2
                  for i in range(len(sub.samples))]
            out[n - 1, m - 1] = float(np.sqrt(np.mean(np.concatenate(sq))))
    return out


@dataclass(frozen=True)
class SweepSettings:
    """Single-transmitter pipeline settings reused at every sweep point."""

    params: PropagationParams            # ref_power/beta/shadowing template
    train_samples: int = 3000
    test_samples: int = 3000
    val_fraction: float = 0.2
    hidden_dims: tuple = (128, 128, 128)
    train_config: mlp.TrainConfig = field(default_factory=mlp.TrainConfig)
    rem_resolution: float = 0.1
    ps_params: PsParams = field(default_factory=PsParams)
    fixed_density: float = 4.0           # sensors per 100 m^2, constant-density mode
    base_area: tuple = (20.0, 20.0)      # constant-area mode


@dataclass
class SweepPoint:
    mode: str
    n_sensors: int
    area_width: float
    area_height: float
    density: float                       # sensors per 100 m^2
    reports: dict                        # algo name -> EvalReport


def density_for(n_sensors: int, area_width: float, area_height: float) -> float:
    return 100.0 * n_sensors / (area_width * area_height)


def sweep_point_geometry(mode: str, n_sensors: int, settings: SweepSettings):
    if mode == "constant-density":
        side = float(np.sqrt(100.0 * n_sensors / settings.fixed_density))
        return side, side
    if mode == "constant-area":
        return settings.base_area
    raise ValueError(f"unknown sweep mode '{mode}'")


def run_sweep_point(mode: str, n_sensors: int, settings: SweepSettings,
                    base_seed: int, algos=("dl", "ps", "reml")) -> SweepPoint:
    """Train and evaluate a fresh single-transmitter pipeline at one grid point."""
    area_w, area_h = sweep_point_geometry(mode, n_sensors, settings)
    layout = grid_layout(n_sensors, area_w, area_h)
    seed_key = ("sweep", mode, n_sensors)
    train_full = generate_dataset(
        GenConfig(layout, settings.params, settings.train_samples, nt_max=1),
        stream(base_seed, *seed_key, "dataset-train").integers(2 ** 62))
    test = generate_dataset(
        GenConfig(layout, settings.params, settings.test_samples, nt_max=1),
        stream(base_seed, *seed_key, "dataset-test").integers(2 ** 62))
    train, val = split_train_val(train_full, 1.0 - settings.val_fraction, seed=base_seed)
    norm = fit_normalizer(train)
    reports = {}
    if "dl" in algos:
        dims = (layout.n_sensors, *settings.hidden_dims, 2)
        net = mlp.init_xavier(dims, "linear",
                              stream(base_seed, *seed_key, "model-init"))
        shuffle_seed = stream(base_seed, *seed_key, "model-shuffle").integers(2 ** 62)
        cfg = replace(settings.train_config, seed=int(shuffle_seed))
        data = _regression_data(train, val, norm)
        best, _ = mlp.train(net, data[0], data[1], cfg)
        reports["dl"] = eval_dl_oracle({1: best}, norm, test)[1]
    if "ps" in algos:
        ps_seed = stream(base_seed, *seed_key, "ps").integers(2 ** 62)
        reports["ps"] = eval_ps(layout, settings.params, settings.ps_params, test,
                                int(ps_seed))[1]
    if "reml" in algos:
        reports["reml"] = eval_reml(layout, settings.params, settings.rem_resolution,
                                    test)[1]
    if "rg" in algos:
        rg_seed = stream(base_seed, *seed_key, "rg").integers(2 ** 62)
        reports["rg"] = eval_rg(layout, test, int(rg_seed))[1]
    density = density_for(n_sensors, area_w, area_h)
    for rep in reports.values():
        rep.density = density
    return SweepPoint(mode=mode, n_sensors=n_sensors, area_width=area_w,
                      area_height=area_h, density=density, reports=reports)


def density_sweep(mode: str, n_sensors_grid, settings: SweepSettings, base_seed: int,
                  algos=("dl", "ps", "reml")) -> list:
    """Fresh pipelines across the sensor grid; see run_sweep_point."""
    return [run_sweep_point(mode, int(n_s), settings, base_seed, algos)
            for n_s in n_sensors_grid]


def _regression_data(train: Dataset, val: Dataset, norm):
    x_train = norm.normalize_features(train.rss_matrix())
    y_train = norm.normalize_targets(train.coord_matrix())
    x_val = norm.normalize_features(val.rss_matrix())
    y_val = norm.normalize_targets(val.coord_matrix())
    return (x_train, y_train), (x_val, y_val)
