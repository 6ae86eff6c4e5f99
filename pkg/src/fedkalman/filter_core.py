"""Linear Kalman filtering for the constant-velocity vehicle model.

State is 3D position. The motion model treats IMU velocity as a control
input with an identity state transition:

    x_pred = x_prev + dt * u

and the measurement is a direct noisy observation of position (the
measurement map is the identity, so the extended filter reduces to the
plain linear one). Two sequence drivers are provided:

* ``run_analytic_kf``   -- the classic recursion, gain from covariances:
      K = S_pred (S_pred + Q)^-1,   S_upd = (I - K) S_pred
* ``run_gain_injected_kf`` -- the gain is produced per step by an external
  source (e.g. a learned estimator); the covariance update uses the
  gain-form variant S_upd = S_pred - S_pred K. The two updates coincide
  whenever S_pred and K commute (in particular for diagonal noise).

All functions are pure; covariances are symmetrized after every update.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, NumericalError

SYM_TOL = 1e-9
PSD_TOL = -1e-9
COND_LIMIT = 1e12


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,):
        raise DataError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def _as_mat3(m, name: str) -> np.ndarray:
    arr = np.asarray(m, dtype=float)
    if arr.shape != (3, 3):
        raise DataError(f"{name} must be a 3x3 matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def symmetrize(m: np.ndarray) -> np.ndarray:
    """(M + M^T) / 2 -- numerical hygiene after covariance updates."""
    return 0.5 * (m + m.T)


def _check_psd(m: np.ndarray, name: str) -> np.ndarray:
    if np.max(np.abs(m - m.T)) > SYM_TOL:
        raise DataError(f"{name} is not symmetric within {SYM_TOL}")
    eigs = np.linalg.eigvalsh(symmetrize(m))
    if eigs.min() < PSD_TOL:
        raise DataError(f"{name} is not PSD (min eigenvalue {eigs.min():.3e})")
    return m


@dataclass(frozen=True)
class StateEstimate:
    """Position mean (m) and covariance (m^2) of one vehicle at one step."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_vec3(self.mean, "mean"))
        cov = _as_mat3(self.covariance, "covariance")
        _check_psd(cov, "covariance")
        object.__setattr__(self, "covariance", symmetrize(cov))


@dataclass(frozen=True)
class ControlInput:
    """IMU velocity (m/s) over one sampling interval dt (s)."""

    velocity: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "velocity", _as_vec3(self.velocity, "velocity"))
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise DataError(f"dt must be a positive finite scalar, got {self.dt}")


@dataclass(frozen=True)
class Measurement:
    """GNSS position fix, optionally paired with the measured velocity."""

    position: np.ndarray
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec3(self.position, "position"))
        if self.velocity is not None:
            object.__setattr__(self, "velocity", _as_vec3(self.velocity, "velocity"))


@dataclass(frozen=True)
class NoiseModel:
    """State-transition covariance (process) and measurement covariance."""

    state_cov: np.ndarray
    meas_cov: np.ndarray

    def __post_init__(self):
        sc = _as_mat3(self.state_cov, "state_cov")
        mc = _as_mat3(self.meas_cov, "meas_cov")
        _check_psd(sc, "state_cov")
        _check_psd(mc, "meas_cov")
        object.__setattr__(self, "state_cov", symmetrize(sc))
        object.__setattr__(self, "meas_cov", symmetrize(mc))


@dataclass
class FilterTrace:
    """Per-timestep record of one filter run. Row t describes step t."""

    predicted_means: np.ndarray   # (T, 3)
    predicted_covs: np.ndarray    # (T, 3, 3)
    gains: np.ndarray             # (T, 3, 3)
    updated_means: np.ndarray     # (T, 3)
    updated_covs: np.ndarray      # (T, 3, 3)
    innovations: np.ndarray       # (T, 3)

    def __len__(self) -> int:
        return self.updated_means.shape[0]

    @property
    def estimates(self) -> np.ndarray:
        """Updated position means as a 3xT array (metrics convention)."""
        return self.updated_means.T


@dataclass(frozen=True)
class GainStep:
    """Context handed to a gain source for one filter step."""

    index: int
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    measurement: Measurement


GainSource = Callable[[GainStep], np.ndarray]


def predict_mean(prev: StateEstimate, u: ControlInput) -> np.ndarray:
    """Constant-velocity prediction: x_pred = x_prev + dt * u."""
    return prev.mean + u.dt * u.velocity


def predict_cov(prev_cov: np.ndarray, state_cov: np.ndarray) -> np.ndarray:
    """Covariance prediction with identity transition: S_pred = S_prev + R."""
    prev_cov = _check_psd(_as_mat3(prev_cov, "prev_cov"), "prev_cov")
    state_cov = _check_psd(_as_mat3(state_cov, "state_cov"), "state_cov")
    return symmetrize(prev_cov + state_cov)


def analytic_gain(pred_cov: np.ndarray, meas_cov: np.ndarray) -> np.ndarray:
    """K = S_pred (S_pred + Q)^-1 (identity measurement map)."""
    pred_cov = _as_mat3(pred_cov, "pred_cov")
    meas_cov = _as_mat3(meas_cov, "meas_cov")
    innov_cov = symmetrize(pred_cov + meas_cov)
    cond = np.linalg.cond(innov_cov)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(
            f"innovation covariance numerically singular (cond~{cond:.3e})"
        )
    # K = S W^-1 with both symmetric: K^T = W^-1 S.
    return np.linalg.solve(innov_cov, pred_cov).T


def update_mean(pred: np.ndarray, z: Measurement, gain: np.ndarray) -> np.ndarray:
    """x_upd = x_pred + K (z - x_pred)."""
    pred = _as_vec3(pred, "pred")
    return pred + _as_mat3(gain, "gain") @ (z.position - pred)


def update_cov_analytic(pred_cov: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """S_upd = (I - K) S_pred, symmetrized."""
    pred_cov = _as_mat3(pred_cov, "pred_cov")
    gain = _as_mat3(gain, "gain")
    return symmetrize((np.eye(3) - gain) @ pred_cov)


def update_cov_gain_form(pred_cov: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """S_upd = S_pred - S_pred K, symmetrized.

    Equals ``update_cov_analytic`` whenever S_pred and K commute (e.g. both
    diagonal); the two forms are kept separate on purpose.
    """
    pred_cov = _as_mat3(pred_cov, "pred_cov")
    gain = _as_mat3(gain, "gain")
    return symmetrize(pred_cov - pred_cov @ gain)


def _check_lengths(measurements, controls):
    if len(measurements) == 0:
        raise DataError("measurement sequence is empty")
    if len(measurements) != len(controls):
        raise DataError(
            f"sequence length mismatch: {len(measurements)} measurements "
            f"vs {len(controls)} controls"
        )


def _run(measurements, controls, noise, init, gain_fn, cov_update):
    _check_lengths(measurements, controls)
    n = len(measurements)
    pm = np.empty((n, 3))
    pc = np.empty((n, 3, 3))
    ks = np.empty((n, 3, 3))
    um = np.empty((n, 3))
    uc = np.empty((n, 3, 3))
    innov = np.empty((n, 3))

    mean, cov = init.mean, init.covariance
    for t, (z, u) in enumerate(zip(measurements, controls)):
        x_pred = mean + u.dt * u.velocity
        s_pred = symmetrize(cov + noise.state_cov)
        gain = np.asarray(gain_fn(GainStep(t, x_pred, s_pred, z)), dtype=float)
        if gain.shape != (3, 3) or not np.all(np.isfinite(gain)):
            raise NumericalError(f"gain source returned invalid gain at step {t}")
        residual = z.position - x_pred
        mean = x_pred + gain @ residual
        cov = cov_update(s_pred, gain)
        pm[t], pc[t], ks[t] = x_pred, s_pred, gain
        um[t], uc[t], innov[t] = mean, cov, residual
    return FilterTrace(pm, pc, ks, um, uc, innov)


def run_analytic_kf(
    measurements: Sequence[Measurement],
    controls: Sequence[ControlInput],
    noise: NoiseModel,
    init: StateEstimate,
) -> FilterTrace:
    """Full analytic recursion; deterministic in its inputs."""
    return _run(
        measurements,
        controls,
        noise,
        init,
        lambda step: analytic_gain(step.predicted_cov, noise.meas_cov),
        update_cov_analytic,
    )


def run_gain_injected_kf(
    measurements: Sequence[Measurement],
    controls: Sequence[ControlInput],
    noise: NoiseModel,
    gain_source: GainSource,
    init: StateEstimate,
) -> FilterTrace:
    """Same recursion with the gain supplied per step by ``gain_source``.

    The covariance update uses the gain form S_pred - S_pred K. If the
    source reproduces the analytic gain and the noise is diagonal, the
    trace matches ``run_analytic_kf`` to floating-point accuracy.
    """
    return _run(measurements, controls, noise, init, gain_source, update_cov_gain_form)


def riccati_fixed_point(
    state_cov: np.ndarray,
    meas_cov: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Iterate the predicted-covariance recursion to its fixed point.

    S <- R + (I - S (S + Q)^-1) S, stopped when successive iterates differ
    by at most ``tol`` element-wise. Used as an independent oracle for the
    steady-state behaviour of ``run_analytic_kf``.
    """
    state_cov = _as_mat3(state_cov, "state_cov")
    meas_cov = _as_mat3(meas_cov, "meas_cov")
    s = state_cov.copy()
    for _ in range(max_iter):
        gain = analytic_gain(s, meas_cov)
        s_next = symmetrize(state_cov + (np.eye(3) - gain) @ s)
        if np.max(np.abs(s_next - s)) <= tol:
            return s_next
        s = s_next
    raise NumericalError(f"covariance recursion did not converge within {max_iter} iterations")
