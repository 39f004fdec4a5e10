"""Radio-environment-map localization.

Ordinary Kriging interpolates the sensor RSS readings onto a pixel grid in
the dB domain; transmitters are read off the map as the strongest pixel, or
for several transmitters, as the strongest pixel within each supra-threshold
region after Otsu histogram thresholding and 4-connected labeling.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.ndimage import label as connected_label
from scipy.spatial.distance import cdist

from .propagation import SensorLayout, TransmitterSet


class KrigingError(ValueError):
    pass


@dataclass(frozen=True)
class RadioMap:
    """Interpolated RSS pixel grid.

    values[ix, iy] is the dB prediction at the center of the pixel whose
    lower-left corner sits at (origin + (ix, iy) * resolution); ix runs along
    the area width.
    """

    values: np.ndarray
    resolution: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_pixels(self) -> int:
        return self.values.size

    def pixel_center(self, ix, iy) -> np.ndarray:
        return np.stack([self.origin[0] + (np.asarray(ix) + 0.5) * self.resolution,
                         self.origin[1] + (np.asarray(iy) + 0.5) * self.resolution],
                        axis=-1)


class KrigingModel:
    """Ordinary-Kriging predictor for one set of sensor measurements.

    Solves [C 1; 1^T 0] [w; mu] = [c(x); 1] with the exponential covariance
    c(d) = sigma^2 exp(-d / d_c). Predictions use precomputed dual weights so
    a map query costs one covariance row per pixel.
    """

    def __init__(self, layout: SensorLayout, rss_db: np.ndarray,
                 shadow_variance_db: float, decorrelation_m: float):
        rss_db = np.asarray(rss_db, dtype=float)
        if layout.n_sensors < 2:
            raise KrigingError("ordinary Kriging needs at least 2 sensors")
        if rss_db.shape != (layout.n_sensors,):
            raise KrigingError("need exactly one RSS value per sensor")
        if shadow_variance_db <= 0 or decorrelation_m <= 0:
            raise KrigingError("covariance parameters must be positive")
        self.layout = layout
        self.rss_db = rss_db
        self.shadow_variance_db = float(shadow_variance_db)
        self.decorrelation_m = float(decorrelation_m)
        n = layout.n_sensors
        cov = shadow_variance_db * np.exp(
            -cdist(layout.positions, layout.positions) / decorrelation_m)
        system = np.zeros((n + 1, n + 1))
        system[:n, :n] = cov
        system[:n, n] = 1.0
        system[n, :n] = 1.0
        self._factor = _factorize(system, cov, shadow_variance_db)
        rhs = np.concatenate([rss_db, [0.0]])
        self._dual = lu_solve(self._factor, rhs)

    def _query_covariance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return self.shadow_variance_db * np.exp(
            -cdist(points, self.layout.positions) / self.decorrelation_m)

    def predict(self, points: np.ndarray) -> np.ndarray:
        """Kriging prediction (dB) at one or more query points."""
        c = self._query_covariance(points)
        return c @ self._dual[:-1] + self._dual[-1]

    def weights(self, point: np.ndarray):
        """Primal weights and Lagrange multiplier at one query point."""
        c = self._query_covariance(point)[0]
        sol = lu_solve(self._factor, np.concatenate([c, [1.0]]))
        return sol[:-1], sol[-1]


def _factorize(system: np.ndarray, cov: np.ndarray, sill: float):
    n = cov.shape[0]
    for jitter in (0.0, 1e-8 * sill):
        attempt = system.copy()
        attempt[:n, :n] += jitter * np.eye(n)
        try:
            factor = lu_factor(attempt)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(factor[0])) and not np.any(np.diag(factor[0]) == 0.0):
            return factor
    raise KrigingError("Kriging system is singular even after diagonal jitter")


def fit_kriging(layout: SensorLayout, rss_db: np.ndarray, shadow_variance_db: float,
                decorrelation_m: float) -> KrigingModel:
    """Kriging model reusing the generative covariance (no variogram fit)."""
    return KrigingModel(layout, rss_db, shadow_variance_db, decorrelation_m)


def _pixel_count(extent: float, resolution: float, axis: str) -> int:
    ratio = extent / resolution
    count = int(round(ratio))
    if count < 1 or abs(ratio - count) > 1e-9 * max(1.0, count):
        raise KrigingError(
            f"area {axis} {extent} is not divisible by resolution {resolution}")
    return count


def pixel_centers(area_width: float, area_height: float, resolution: float):
    """Pixel-center coordinate grid; returns (P_w, P_h, centers(K, 2))."""
    p_w = _pixel_count(area_width, resolution, "width")
    p_h = _pixel_count(area_height, resolution, "height")
    xs = (np.arange(p_w) + 0.5) * resolution
    ys = (np.arange(p_h) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return p_w, p_h, np.column_stack([gx.ravel(), gy.ravel()])


def build_rem(model: KrigingModel, area_width: float, area_height: float,
              resolution: float) -> RadioMap:
    """Radio environment map: Kriging prediction at every pixel center."""
    p_w, p_h, centers = pixel_centers(area_width, area_height, resolution)
    values = model.predict(centers).reshape(p_w, p_h)
    return RadioMap(values=values, resolution=resolution)


class RemBuilder:
    """Amortized REM construction for many measurement vectors on one layout.

    The pixel-to-sensor covariance matrix and the system factorization depend
    only on geometry, so they are computed once; each RSS vector then costs a
    single (K x N_s) mat-vec.
    """

    def __init__(self, layout: SensorLayout, shadow_variance_db: float,
                 decorrelation_m: float, resolution: float):
        if layout.n_sensors < 2:
            raise KrigingError("ordinary Kriging needs at least 2 sensors")
        self.layout = layout
        self.resolution = float(resolution)
        self.shadow_variance_db = float(shadow_variance_db)
        self.decorrelation_m = float(decorrelation_m)
        n = layout.n_sensors
        cov = shadow_variance_db * np.exp(
            -cdist(layout.positions, layout.positions) / decorrelation_m)
        system = np.zeros((n + 1, n + 1))
        system[:n, :n] = cov
        system[:n, n] = 1.0
        system[n, :n] = 1.0
        self._factor = _factorize(system, cov, shadow_variance_db)
        self.p_w, self.p_h, centers = pixel_centers(
            layout.area_width, layout.area_height, resolution)
        self._pixel_cov = shadow_variance_db * np.exp(
            -cdist(centers, layout.positions) / decorrelation_m)

    def map_values(self, rss_db: np.ndarray) -> np.ndarray:
        """(B, N_s) measurements to (B, P_w, P_h) map values."""
        rss_db = np.atleast_2d(rss_db)
        rhs = np.concatenate([rss_db, np.zeros((len(rss_db), 1))], axis=1)
        dual = lu_solve(self._factor, rhs.T)
        maps = self._pixel_cov @ dual[:-1] + dual[-1]
        return np.ascontiguousarray(maps.T).reshape(len(rss_db), self.p_w, self.p_h)

    def rem(self, rss_db: np.ndarray) -> RadioMap:
        return RadioMap(values=self.map_values(rss_db)[0], resolution=self.resolution)


def argmax_pixel(rem: RadioMap) -> np.ndarray:
    """Pixel-center coordinate (meters) of the map maximum.

    Ties resolve to the smallest row-major index, i.e. numpy argmax order.
    """
    if rem.values.size == 0:
        raise KrigingError("empty radio map")
    ix, iy = np.unravel_index(int(np.argmax(rem.values)), rem.values.shape)
    return rem.pixel_center(ix, iy)


def otsu_threshold(values: np.ndarray, bins: int = 256):
    """Otsu threshold over a fixed [min, max] histogram; None when degenerate.

    Returns the center of the bin maximizing the between-class variance;
    pixels strictly above it form the foreground.
    """
    flat = np.asarray(values, dtype=float).ravel()
    vmin, vmax = flat.min(), flat.max()
    if vmax == vmin:
        return None
    hist, edges = np.histogram(flat, bins=bins, range=(vmin, vmax))
    prob = hist / flat.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(prob)
    w1 = 1.0 - w0
    mu0 = np.cumsum(prob * centers)
    mu_total = mu0[-1]
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(bins)
    between[valid] = (mu_total * w0[valid] - mu0[valid]) ** 2 / (w0[valid] * w1[valid])
    return float(centers[int(np.argmax(between))])


def threshold_segment(rem: RadioMap, decorrelation_m: float = 0.0) -> list:
    """Supra-threshold 4-connected regions of the map, as boolean masks.

    Otsu thresholding on the dB histogram; regions covering fewer than
    (d_c / R)^2 pixels are discarded as shadowing artifacts. A constant map
    has no histogram to split and is defined to be a single region. An empty
    list means no region rose above the threshold.
    """
    if rem.values.size == 0:
        raise KrigingError("empty radio map")
    threshold = otsu_threshold(rem.values)
    if threshold is None:
        return [np.ones_like(rem.values, dtype=bool)]
    mask = rem.values > threshold
    if not mask.any():
        return []
    labels, n_regions = connected_label(mask)
    min_pixels = (decorrelation_m / rem.resolution) ** 2
    regions = []
    for r in range(1, n_regions + 1):
        region = labels == r
        if region.sum() >= min_pixels:
            regions.append(region)
    return regions


def localize_multi(rem: RadioMap, decorrelation_m: float = 0.0):
    """Per-region strongest pixels as transmitter estimates.

    The estimate count is whatever segmentation found; None when no region
    survives (zero detected transmitters).
    """
    regions = threshold_segment(rem, decorrelation_m)
    if not regions:
        return None
    flat = rem.values.ravel()
    coords = []
    for region in regions:
        idx = np.flatnonzero(region.ravel())
        best = idx[int(np.argmax(flat[idx]))]
        ix, iy = np.unravel_index(best, rem.values.shape)
        coords.append(rem.pixel_center(ix, iy))
    return TransmitterSet(np.array(coords))


def reml_complexity(n_pixels: int, n_sensors: int) -> float:
    """Pixel-count * N_s * log2(N_s) operation estimate for one map."""
    if n_pixels < 1 or n_sensors < 1:
        raise ValueError("n_pixels and n_sensors must be >= 1")
    return float(n_pixels) * n_sensors * np.log2(n_sensors)


def write_rem(rem: RadioMap, path) -> None:
    """Text dump: 'rem R=<r> w=<Pw> h=<Ph>' header, then one line per x-index."""
    p_w, p_h = rem.values.shape
    lines = [f"rem R={rem.resolution:.17g} w={p_w} h={p_h}"]
    for row in rem.values:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
