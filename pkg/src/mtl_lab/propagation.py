"""Log-distance path loss with spatially correlated log-normal shadowing.

The channel seen by a fixed grid of sensing units: each active transmitter
contributes linear-scale power that decays as a power law of distance and is
multiplied by a log-normal shadowing term. Shadowing is correlated across
sensors with an exponential decay in sensor separation (Gudmundson model) and
independent across transmitters. All powers are handled in dB externally and
in linear milliwatt-scale internally.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

SPEED_OF_LIGHT = 299792458.0


class PropagationError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SensorLayout:
    """Fixed sensing-unit coordinates inside a rectangular area.

    positions: (N_s, 2) array of x/y coordinates in meters.
    area_width / area_height: extent of the surveilled rectangle in meters.
    """

    positions: np.ndarray
    area_width: float
    area_height: float

    def __post_init__(self):
        pos = _readonly(np.atleast_2d(self.positions))
        object.__setattr__(self, "positions", pos)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise PropagationError("positions must be a nonempty (N, 2) array")
        if self.area_width <= 0 or self.area_height <= 0:
            raise PropagationError("area dimensions must be positive")
        if np.any(pos[:, 0] < 0) or np.any(pos[:, 0] > self.area_width) \
                or np.any(pos[:, 1] < 0) or np.any(pos[:, 1] > self.area_height):
            raise PropagationError("sensor positions must lie inside the area")
        if len(np.unique(pos, axis=0)) != len(pos):
            raise PropagationError("sensor positions must be pairwise distinct")

    @property
    def n_sensors(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other):
        return (isinstance(other, SensorLayout)
                and np.array_equal(self.positions, other.positions)
                and self.area_width == other.area_width
                and self.area_height == other.area_height)


@dataclass(frozen=True)
class PropagationParams:
    """Path-loss and shadowing parameters.

    ref_power_db: received power (dB) at distance ref_distance from one
        transmitter; equal for all transmitters.
    path_loss_exponent: power-law decay rate of received power.
    shadow_variance_db: variance of the log-normal shadowing in dB^2.
    decorrelation_m: length scale of the exponential shadowing correlation.
    """

    ref_power_db: float
    ref_distance: float = 1.0
    path_loss_exponent: float = 3.23
    shadow_variance_db: float = 10.0
    decorrelation_m: float = 1.0

    def __post_init__(self):
        if self.ref_distance <= 0:
            raise PropagationError("ref_distance must be > 0")
        if self.path_loss_exponent <= 0:
            raise PropagationError("path_loss_exponent must be > 0")
        if self.shadow_variance_db < 0:
            raise PropagationError("shadow_variance_db must be >= 0")
        if self.decorrelation_m <= 0:
            raise PropagationError("decorrelation_m must be > 0")


@dataclass(frozen=True)
class TransmitterSet:
    """Coordinates of the simultaneously active transmitters, (N_t, 2) meters."""

    coords: np.ndarray

    def __post_init__(self):
        c = _readonly(np.atleast_2d(self.coords))
        object.__setattr__(self, "coords", c)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 1:
            raise PropagationError("coords must be a nonempty (N, 2) array")

    @property
    def n_transmitters(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other):
        return isinstance(other, TransmitterSet) and np.array_equal(self.coords, other.coords)


@dataclass(frozen=True)
class ShadowingField:
    """Shadowing covariance over the sensors plus its Cholesky factor."""

    covariance: np.ndarray
    cholesky_factor: np.ndarray
    jitter_db2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "covariance", _readonly(self.covariance))
        object.__setattr__(self, "cholesky_factor", _readonly(self.cholesky_factor))

    @property
    def n_sensors(self) -> int:
        return self.covariance.shape[0]


def fspl_db(distance_m: float, freq_hz: float) -> float:
    """Free-space path loss in dB at the given distance and carrier frequency."""
    if distance_m <= 0 or freq_hz <= 0:
        raise PropagationError("distance and frequency must be positive")
    return 20.0 * np.log10(distance_m) + 20.0 * np.log10(freq_hz) \
        + 20.0 * np.log10(4.0 * np.pi / SPEED_OF_LIGHT)


def reference_power_db(tx_power_db: float, freq_hz: float, ref_distance: float = 1.0) -> float:
    """Received power at the reference distance: transmit power minus FSPL.

    With the 20 dBm / 2.4 GHz defaults this gives about -20.05 dBm at 1 m.
    """
    return tx_power_db - fspl_db(ref_distance, freq_hz)


def grid_layout(n_sensors: int, area_width: float, area_height: float) -> SensorLayout:
    """Uniform sqrt(n) x sqrt(n) sensor grid with sensors at cell centers.

    n_sensors must be a perfect square; the area is divided into equal cells
    and each sensor sits at its cell center (half a pitch away from the edges).
    """
    if n_sensors < 1:
        raise PropagationError("n_sensors must be >= 1")
    side = round(float(n_sensors) ** 0.5)
    if side * side != n_sensors:
        raise PropagationError(
            f"grid layout needs a perfect-square sensor count, got {n_sensors}")
    if area_width <= 0 or area_height <= 0:
        raise PropagationError("area dimensions must be positive")
    pitch_x = area_width / side
    pitch_y = area_height / side
    xs = (np.arange(side) + 0.5) * pitch_x
    ys = (np.arange(side) + 0.5) * pitch_y
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    positions = np.column_stack([gx.ravel(), gy.ravel()])
    return SensorLayout(positions, area_width, area_height)


def shadowing_covariance(layout: SensorLayout, shadow_variance_db: float,
                         decorrelation_m: float) -> ShadowingField:
    """Exponential-decay shadowing covariance C_jk = sigma^2 exp(-d_jk / d_c).

    The factor is lower-triangular Cholesky; on an indefiniteness failure a
    single jitter of 1e-8 * sigma^2 is added to the diagonal before giving up.
    """
    if shadow_variance_db < 0:
        raise PropagationError("shadow_variance_db must be >= 0")
    if decorrelation_m <= 0:
        raise PropagationError("decorrelation_m must be > 0")
    dist = cdist(layout.positions, layout.positions)
    cov = shadow_variance_db * np.exp(-dist / decorrelation_m)
    if shadow_variance_db == 0.0:
        zero = np.zeros_like(cov)
        return ShadowingField(covariance=cov, cholesky_factor=zero)
    try:
        factor = np.linalg.cholesky(cov)
        jitter = 0.0
    except np.linalg.LinAlgError:
        jitter = 1e-8 * shadow_variance_db
        try:
            factor = np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            smallest = np.linalg.eigvalsh(cov).min()
            raise PropagationError(
                "shadowing covariance is not positive definite even after "
                f"jitter; smallest eigenvalue {smallest:.3e}") from None
    return ShadowingField(covariance=cov, cholesky_factor=factor, jitter_db2=jitter)


def sample_shadowing(field: ShadowingField, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean correlated shadowing draw (dB), one value per sensor."""
    z = rng.standard_normal(field.n_sensors)
    return field.cholesky_factor @ z


def received_power(txs: TransmitterSet, layout: SensorLayout, params: PropagationParams,
                   shadowing_db: np.ndarray | None = None) -> np.ndarray:
    """RSS measurement vector in dB at every sensor (superposition of transmitters).

    shadowing_db: (N_t, N_s) per-transmitter shadowing vectors in dB, or None
        for the noiseless channel. Distances below ref_distance are clamped to
        it so a transmitter on top of a sensor cannot produce unbounded power.
    """
    linear = received_power_linear(txs.coords, layout.positions, params, shadowing_db)
    return 10.0 * np.log10(linear)


def received_power_linear(tx_coords: np.ndarray, sensor_positions: np.ndarray,
                          params: PropagationParams,
                          shadowing_db: np.ndarray | None = None) -> np.ndarray:
    """Linear-scale received power per sensor; the dB-domain wrapper logs it."""
    tx_coords = np.atleast_2d(tx_coords)
    dist = cdist(tx_coords, sensor_positions)
    np.maximum(dist, params.ref_distance, out=dist)
    p0_linear = 10.0 ** (params.ref_power_db / 10.0)
    per_tx = p0_linear * (dist / params.ref_distance) ** (-params.path_loss_exponent)
    if shadowing_db is not None:
        shadowing_db = np.atleast_2d(shadowing_db)
        if shadowing_db.shape != per_tx.shape:
            raise PropagationError(
                f"need one shadowing vector per transmitter: expected shape "
                f"{per_tx.shape}, got {shadowing_db.shape}")
        per_tx = per_tx * 10.0 ** (shadowing_db / 10.0)
    return per_tx.sum(axis=0)
