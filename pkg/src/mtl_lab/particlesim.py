"""Force-driven localization as a particle relaxation.

Sensors are fixed particles; transmitter hypotheses are free particles. Each
iteration compares the RSS the free particles would produce (noiseless path
loss, transmit power known) with the measured RSS; sensors that measured more
than calculated pull particles toward them, sensors that measured less push
them away. The simulation stops on an iteration cap, on total movement
falling below a tolerance, or on the power mismatch norm becoming negligible.
"""

from dataclasses import dataclass, field

import numpy as np

from .propagation import PropagationParams, SensorLayout, TransmitterSet


@dataclass(frozen=True)
class PsParams:
    max_iter: int = 500
    movement_tol: float = 1e-3     # meters, summed over particles
    power_tol: float = 1e-2        # dB, Euclidean norm over sensors
    step_gain: float = 0.05        # meters per unit of normalized force
    init_radius: float = 0.5       # initial scatter around the strongest sensors

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.movement_tol <= 0 or self.power_tol <= 0 or self.step_gain <= 0:
            raise ValueError("tolerances and step_gain must be > 0")
        if self.init_radius < 0:
            raise ValueError("init_radius must be >= 0")


@dataclass
class PsState:
    positions: np.ndarray          # (n_t, 2), always inside the area
    iterations: int = 0            # movement steps performed so far
    last_movement: float = np.inf
    last_error_norm: float = np.inf


@dataclass
class PsDiagnostics:
    stop_condition: str            # "max_iter" | "movement" | "power"
    iterations: int
    error_norm: float
    movement: float
    plm_evals: int                 # path-loss-model evaluations (tx-sensor pairs)
    trajectory: list | None = None


def _clamp_to_area(positions: np.ndarray, layout: SensorLayout) -> np.ndarray:
    clamped = positions.copy()
    clamped[..., 0] = np.clip(clamped[..., 0], 0.0, layout.area_width)
    clamped[..., 1] = np.clip(clamped[..., 1], 0.0, layout.area_height)
    return clamped


def calc_rss_db(positions: np.ndarray, layout: SensorLayout,
                params: PropagationParams) -> np.ndarray:
    """Noiseless RSS at every sensor for particle positions (..., n_t, 2).

    Shared by the single-run and batched paths so both do the same arithmetic.
    """
    diff = layout.positions - positions[..., None, :]       # (..., n_t, N_s, 2)
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.maximum(dist, params.ref_distance, out=dist)
    p0_linear = 10.0 ** (params.ref_power_db / 10.0)
    linear = (p0_linear * (dist / params.ref_distance) ** (-params.path_loss_exponent)
              ).sum(axis=-2)
    return 10.0 * np.log10(linear)


def _forces_from_errors(positions: np.ndarray, errors_db: np.ndarray,
                        layout: SensorLayout, params: PropagationParams) -> np.ndarray:
    """Per-particle force: sum over sensors of error * (v - x) / max(d, d0)^2."""
    diff = layout.positions - positions[..., None, :]       # (..., n_t, N_s, 2)
    dist2 = (diff * diff).sum(axis=-1)
    np.maximum(dist2, params.ref_distance ** 2, out=dist2)
    weight = errors_db[..., None, :] / dist2                # (..., n_t, N_s)
    return (weight[..., None] * diff).sum(axis=-2)


def ps_initialize(rss_db: np.ndarray, layout: SensorLayout, n_t: int,
                  rng: np.random.Generator, params: PsParams = PsParams()) -> PsState:
    """Free particles near the n_t sensors with the strongest measurements.

    Each particle is offset uniformly within a disc of init_radius; when n_t
    exceeds the sensor count the strongest sensors are reused cyclically.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    rss_db = np.asarray(rss_db, dtype=float)
    order = np.argsort(-rss_db, kind="stable")
    anchors = layout.positions[[order[i % layout.n_sensors] for i in range(n_t)]]
    radius = params.init_radius * np.sqrt(rng.uniform(0.0, 1.0, size=n_t))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n_t)
    offsets = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    return PsState(positions=_clamp_to_area(anchors + offsets, layout))


def ps_forces(state: PsState, rss_measured: np.ndarray, layout: SensorLayout,
              params: PropagationParams):
    """Force vectors on the free particles, plus the per-sensor dB errors.

    Positive error (measured above calculated) makes a sensor an attractor,
    negative a repeller.
    """
    calc = calc_rss_db(state.positions, layout, params)
    errors = np.asarray(rss_measured, dtype=float) - calc
    forces = _forces_from_errors(state.positions, errors, layout, params)
    return forces, errors


def ps_step(state: PsState, forces: np.ndarray, params: PsParams,
            layout: SensorLayout) -> PsState:
    """Move each particle by step_gain * f / (1 + |f|), clamped to the area.

    The normalization bounds every step below step_gain meters, so a huge
    mismatch cannot catapult a particle across the area.
    """
    norms = np.sqrt((forces * forces).sum(axis=-1, keepdims=True))
    new_pos = _clamp_to_area(state.positions + params.step_gain * forces / (1.0 + norms),
                             layout)
    movement = float(np.sqrt(((new_pos - state.positions) ** 2).sum(axis=-1)).sum())
    return PsState(positions=new_pos, iterations=state.iterations + 1,
                   last_movement=movement, last_error_norm=state.last_error_norm)


def ps_run(rss_db: np.ndarray, layout: SensorLayout, n_t: int,
           prop_params: PropagationParams, ps_params: PsParams,
           rng: np.random.Generator, record_trajectory: bool = False):
    """Full relaxation; returns (TransmitterSet, PsDiagnostics).

    Per loop pass: compute errors (stop on power mismatch), then step (stop on
    movement). Exhausting max_iter is the remaining, non-error outcome.
    """
    state = ps_initialize(rss_db, layout, n_t, rng, ps_params)
    rss_db = np.asarray(rss_db, dtype=float)
    condition = "max_iter"
    plm_evals = 0
    trajectory = [] if record_trajectory else None
    for _ in range(ps_params.max_iter):
        forces, errors = ps_forces(state, rss_db, layout, prop_params)
        plm_evals += layout.n_sensors * n_t
        err_norm = float(np.linalg.norm(errors))
        state.last_error_norm = err_norm
        if err_norm < ps_params.power_tol:
            condition = "power"
            break
        state = ps_step(state, forces, ps_params, layout)
        if record_trajectory:
            for i, (x, y) in enumerate(state.positions):
                trajectory.append((state.iterations, i, float(x), float(y),
                                   state.last_movement, err_norm))
        if state.last_movement < ps_params.movement_tol:
            condition = "movement"
            break
    diag = PsDiagnostics(stop_condition=condition, iterations=state.iterations,
                         error_norm=state.last_error_norm,
                         movement=state.last_movement if np.isfinite(state.last_movement)
                         else 0.0,
                         plm_evals=plm_evals, trajectory=trajectory)
    return TransmitterSet(state.positions), diag


def ps_run_batch(rss_matrix: np.ndarray, layout: SensorLayout, n_t: int,
                 prop_params: PropagationParams, ps_params: PsParams, rngs):
    """Vectorized ps_run over many samples; one rng per sample for the init.

    Returns (positions (B, n_t, 2), stop_conditions list, iterations array).
    Runs the same arithmetic as ps_run on stacked arrays, with converged
    samples frozen by an active mask.
    """
    rss_matrix = np.atleast_2d(np.asarray(rss_matrix, dtype=float))
    n_samples = len(rss_matrix)
    if len(rngs) != n_samples:
        raise ValueError("need one rng per sample")
    positions = np.stack([
        ps_initialize(rss_matrix[i], layout, n_t, rngs[i], ps_params).positions
        for i in range(n_samples)])
    iterations = np.zeros(n_samples, dtype=int)
    stop = np.zeros(n_samples, dtype=int)          # 0 max_iter, 1 movement, 2 power
    active = np.ones(n_samples, dtype=bool)
    for _ in range(ps_params.max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pos = positions[idx]
        calc = calc_rss_db(pos, layout, prop_params)
        errors = rss_matrix[idx] - calc
        err_norm = np.sqrt((errors * errors).sum(axis=1))
        hit_power = err_norm < ps_params.power_tol
        stop[idx[hit_power]] = 2
        active[idx[hit_power]] = False
        moving = idx[~hit_power]
        if moving.size == 0:
            continue
        pos = positions[moving]
        forces = _forces_from_errors(pos, errors[~hit_power], layout, prop_params)
        norms = np.sqrt((forces * forces).sum(axis=-1, keepdims=True))
        new_pos = _clamp_to_area(pos + ps_params.step_gain * forces / (1.0 + norms),
                                 layout)
        movement = np.sqrt(((new_pos - pos) ** 2).sum(axis=-1)).sum(axis=-1)
        positions[moving] = new_pos
        iterations[moving] += 1
        hit_move = movement < ps_params.movement_tol
        stop[moving[hit_move]] = 1
        active[moving[hit_move]] = False
    names = {0: "max_iter", 1: "movement", 2: "power"}
    return positions, [names[s] for s in stop], iterations


def ps_complexity(n_sensors: int, n_t: int, n_iter: int) -> int:
    """Path-loss-model evaluations for a run that uses all n_iter iterations."""
    if min(n_sensors, n_t, n_iter) < 0:
        raise ValueError("arguments must be nonnegative")
    return int(n_sensors) * int(n_t) * int(n_iter)


def write_trajectory(diag: PsDiagnostics, path) -> None:
    """CSV trajectory dump: iter, particle, x, y, movement, error_norm."""
    if diag.trajectory is None:
        raise ValueError("run with record_trajectory=True to capture a trajectory")
    lines = ["iter,particle,x,y,movement,error_norm"]
    for it, p, x, y, move, err in diag.trajectory:
        lines.append(f"{it},{p},{x:.17g},{y:.17g},{move:.17g},{err:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
