"""The gain network embedded in the filter recursion, differentiably.

Forward pass per step t (positions zp, measured velocities zv from the
6-row input; the measured velocity doubles as the control input):

    x_pred[t] = x_upd[t-1] + dt * u[t]
    K[t]      = network(features[t], hidden state)
    x_upd[t]  = x_pred[t] + K[t] (zp[t] - x_pred[t])

The features at step t include x_upd[t-1], x_pred[t-1] and x_pred[t-2],
so the filter recursion is part of the computation graph: the backward
pass propagates gradients both through the GRU hidden states and through
the estimate recursion. ``filter_backward`` is the exact reverse-mode
gradient of ``run_learned_filter`` for arbitrary per-step gradients with
respect to the updated estimates.

At a sequence start the hidden state is zeroed, the previous measurement
defaults to the current one, and the previous predicted/updated estimates
default to the init mean.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import gain_network as gn
from .errors import DataError

POS = slice(0, 3)
VEL = slice(3, 6)


def _check_inputs(measured: np.ndarray, dt: float) -> np.ndarray:
    z = np.asarray(measured, dtype=float)
    if z.ndim != 2 or z.shape[0] != 6 or z.shape[1] < 1:
        raise DataError(f"measured input must be 6xT with T >= 1, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DataError("measured input contains non-finite values")
    if not (np.isfinite(dt) and dt > 0):
        raise DataError(f"dt must be positive, got {dt}")
    return z


@dataclass
class LearnedFilterRun:
    """Outputs of one learned-filter pass over a 6xT input window."""

    estimates: np.ndarray     # (3, T) updated position means
    predictions: np.ndarray   # (3, T) predicted position means
    gains: np.ndarray         # (T, 3, 3)
    outputs: List[gn.UncertaintyOutputs]

    def updated_covs(self) -> np.ndarray:
        """Gain-form covariance update applied to the network's S estimate."""
        covs = np.empty((len(self.outputs), 3, 3))
        for t, out in enumerate(self.outputs):
            upd = out.sbar_hat - out.sbar_hat @ out.gain
            covs[t] = 0.5 * (upd + upd.T)
        return covs


def run_learned_filter(
    params: gn.GainNetworkParams,
    measured: np.ndarray,
    dt: float,
    controls: Optional[np.ndarray] = None,
    init_mean: Optional[np.ndarray] = None,
    _want_cache: bool = False,
):
    """Run the gain-network filter over a 6xT measurement window.

    ``controls`` defaults to the measured velocity rows. ``init_mean``
    defaults to the first measured position.
    """
    z = _check_inputs(measured, dt)
    n_steps = z.shape[1]
    u = z[VEL] if controls is None else np.asarray(controls, dtype=float)
    if u.shape != (3, n_steps):
        raise DataError(f"controls must be 3x{n_steps}, got {u.shape}")
    x_prev = z[POS, 0].copy() if init_mean is None else np.asarray(init_mean, dtype=float)

    state = gn.GainNetworkState.zeros(params)
    prev_pos, prev_vel = z[POS, 0], z[VEL, 0]
    xbar_prev, xbar_prev2 = x_prev.copy(), x_prev.copy()

    estimates = np.empty((3, n_steps))
    predictions = np.empty((3, n_steps))
    gains = np.empty((n_steps, 3, 3))
    outputs: List[gn.UncertaintyOutputs] = []
    caches = [] if _want_cache else None

    for t in range(n_steps):
        x_pred = x_prev + dt * u[:, t]
        feat = gn.build_features(
            z[POS, t], z[VEL, t], prev_pos, prev_vel,
            x_prev, xbar_prev, xbar_prev2, dt,
        )
        out, state, cache = gn._forward_step_cached(params, state, feat)
        residual = z[POS, t] - x_pred
        x_upd = x_pred + out.gain @ residual

        estimates[:, t] = x_upd
        predictions[:, t] = x_pred
        gains[t] = out.gain
        outputs.append(out)
        if _want_cache:
            caches.append((cache, residual, out.gain))

        xbar_prev2, xbar_prev = xbar_prev, x_pred
        prev_pos, prev_vel = z[POS, t], z[VEL, t]
        x_prev = x_upd

    run = LearnedFilterRun(estimates, predictions, gains, outputs)
    return (run, caches) if _want_cache else run


def filter_backward(
    params: gn.GainNetworkParams,
    caches,
    d_estimates: np.ndarray,
) -> dict:
    """Backpropagate per-step gradients w.r.t. the updated estimates.

    ``caches`` comes from ``run_learned_filter(..., _want_cache=True)``.
    Returns parameter gradients keyed like the manifest. Gradients w.r.t.
    the init mean and the raw measurements are discarded (both are data).
    """
    n_steps = len(caches)
    d_est = np.asarray(d_estimates, dtype=float)
    if d_est.shape != (3, n_steps):
        raise DataError(f"d_estimates must be 3x{n_steps}, got {d_est.shape}")

    grads = params.zeros_like_grads()
    zero3 = np.zeros((3, 3))
    d_state = tuple(np.zeros(s) for s in params.hidden_sizes)
    # gradient accumulators w.r.t. x_upd[t] / x_pred[t]; filled by later steps
    g_upd = np.zeros((n_steps, 3))
    g_pred = np.zeros((n_steps, 3))
    inv_pos = 1.0 / gn.POS_SCALE

    for t in range(n_steps - 1, -1, -1):
        cache, residual, gain = caches[t]
        gx = d_est[:, t] + g_upd[t]
        # x_upd = x_pred + K (zp - x_pred):  dK = gx (zp - x_pred)^T,
        # and d x_upd / d x_pred = I - K.
        d_gain = np.outer(gx, residual)
        g_pred[t] += gx - gain.T @ gx
        d_feat, d_state = gn._backward_step(
            params, cache, (zero3, zero3, zero3, d_gain), d_state, grads
        )
        # feature slots referencing earlier filter states (position-scaled)
        if t >= 1:
            g_upd[t - 1] += d_feat[gn.FEAT_XHAT_PREV] * inv_pos
            g_pred[t - 1] += d_feat[gn.FEAT_XBAR_PREV] * inv_pos
        if t >= 2:
            g_pred[t - 2] += d_feat[gn.FEAT_XBAR_PREV2] * inv_pos
        # x_pred[t] = x_upd[t-1] + dt u[t]; g_pred[t] is complete here
        if t >= 1:
            g_upd[t - 1] += g_pred[t]
    return grads
