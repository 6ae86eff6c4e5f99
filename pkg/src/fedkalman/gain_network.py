"""Recurrent Kalman-gain estimator and its hand-written gradients.

Architecture: an input embedding feeds three stacked GRU layers joined by
fully connected layers. Each GRU owns a head that emits a 3x3 uncertainty
matrix through a Cholesky-factor parameterization (L L^T + eps*I, so the
outputs are PSD and invertible by construction):

    layer 1 -> process-noise estimate R
    layer 2 -> predicted-state covariance estimate S
    layer 3 -> innovation covariance estimate W   (layer 3 sees both
               earlier hidden states)
    gain      K = S W^-1

The input is a fixed 22-feature vector built from the current and previous
measurement (position + velocity), the previous updated and predicted
position estimates, the twice-previous predicted estimate, and dt.
Positions are scaled by 1/100, velocities by 1/10; dt enters raw. The
measured velocity doubles as the control input, so it occupies a single
slot.

Everything is float64 numpy; forward and backward passes are pure
functions of (params, state, features) and bit-reproducible. The backward
pass is exact reverse-mode differentiation of the unrolled recurrence,
validated against central finite differences in the tests.
"""

import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, DataError, NumericalError

FEATURE_DIM = 22
POS_SCALE = 100.0
VEL_SCALE = 10.0
PSD_FLOOR = 1e-6

# feature layout (after scaling)
FEAT_CUR_POS = slice(0, 3)
FEAT_CUR_VEL = slice(3, 6)
FEAT_PREV_POS = slice(6, 9)
FEAT_PREV_VEL = slice(9, 12)
FEAT_XHAT_PREV = slice(12, 15)
FEAT_XBAR_PREV = slice(15, 18)
FEAT_XBAR_PREV2 = slice(18, 21)
FEAT_DT = 21

# lower-triangular positions of the 6-vector head output
_TRIL_ROWS = (0, 1, 1, 2, 2, 2)
_TRIL_COLS = (0, 0, 1, 0, 1, 2)
_TRIL_DIAG = (0, 2, 5)

PARAM_COUNT_MIN = 15_000
PARAM_COUNT_MAX = 30_000

DEFAULT_HIDDEN_SIZES = (28, 28, 28)

CHECKPOINT_MAGIC = b"FKN1"
CHECKPOINT_VERSION = 1


def canonical_manifest(hidden_sizes=DEFAULT_HIDDEN_SIZES):
    """(name, shape) pairs in the fixed serialization order."""
    h1, h2, h3 = hidden_sizes
    return [
        ("embed.w", (h1, FEATURE_DIM)),
        ("embed.b", (h1,)),
        ("gru1.w_ih", (3 * h1, h1)),
        ("gru1.w_hh", (3 * h1, h1)),
        ("gru1.b_ih", (3 * h1,)),
        ("gru1.b_hh", (3 * h1,)),
        ("head_r.w", (6, h1)),
        ("head_r.b", (6,)),
        ("fc12.w", (h2, h1)),
        ("fc12.b", (h2,)),
        ("gru2.w_ih", (3 * h2, h2)),
        ("gru2.w_hh", (3 * h2, h2)),
        ("gru2.b_ih", (3 * h2,)),
        ("gru2.b_hh", (3 * h2,)),
        ("head_s.w", (6, h2)),
        ("head_s.b", (6,)),
        ("fc23.w", (h3, h1 + h2)),
        ("fc23.b", (h3,)),
        ("gru3.w_ih", (3 * h3, h3)),
        ("gru3.w_hh", (3 * h3, h3)),
        ("gru3.b_ih", (3 * h3,)),
        ("gru3.b_hh", (3 * h3,)),
        ("head_w.w", (6, h3)),
        ("head_w.b", (6,)),
    ]


class GainNetworkParams:
    """Full parameter set of the gain network, keyed by canonical names.

    The manifest order is fixed; it defines the checkpoint layout, the
    flattening used by the trainer, and the element order federation
    averages over.
    """

    def __init__(self, tensors: dict):
        try:
            h1 = tensors["embed.w"].shape[0]
            h2 = tensors["fc12.w"].shape[0]
            h3 = tensors["fc23.w"].shape[0]
        except KeyError as exc:
            raise DataError(f"missing parameter tensor {exc}") from exc
        expected = canonical_manifest((h1, h2, h3))
        got = [(name, tuple(t.shape)) for name, t in tensors.items()]
        if got != expected:
            raise DataError(
                f"parameter manifest mismatch: expected {expected}, got {got}"
            )
        self.hidden_sizes = (h1, h2, h3)
        self.tensors = {
            name: np.ascontiguousarray(tensors[name], dtype=np.float64)
            for name, _ in expected
        }
        count = self.count()
        if not PARAM_COUNT_MIN <= count <= PARAM_COUNT_MAX:
            raise DataError(
                f"parameter count {count} outside "
                f"[{PARAM_COUNT_MIN}, {PARAM_COUNT_MAX}]"
            )

    def manifest(self):
        return [(name, tuple(t.shape)) for name, t in self.tensors.items()]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "GainNetworkParams":
        return GainNetworkParams({k: v.copy() for k, v in self.tensors.items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def with_vector(self, vec: np.ndarray) -> "GainNetworkParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.count(),):
            raise DataError(f"flat vector has wrong length {vec.shape}")
        out, pos = {}, 0
        for name, t in self.tensors.items():
            out[name] = vec[pos : pos + t.size].reshape(t.shape).copy()
            pos += t.size
        return GainNetworkParams(out)

    def squared_norm(self) -> float:
        return float(sum(np.sum(t * t) for t in self.tensors.values()))

    def zeros_like_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def __eq__(self, other):
        if not isinstance(other, GainNetworkParams):
            return NotImplemented
        return self.manifest() == other.manifest() and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


@dataclass
class GainNetworkState:
    """Hidden vectors of the three GRU layers (zeroed at sequence start)."""

    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray

    @classmethod
    def zeros(cls, params: GainNetworkParams) -> "GainNetworkState":
        s1, s2, s3 = params.hidden_sizes
        return cls(np.zeros(s1), np.zeros(s2), np.zeros(s3))

    def check_matches(self, params: GainNetworkParams):
        if (self.h1.shape, self.h2.shape, self.h3.shape) != tuple(
            (s,) for s in params.hidden_sizes
        ):
            raise DataError("hidden-state dimensions do not match parameters")


@dataclass
class UncertaintyOutputs:
    """Network outputs for one step: R, S, W estimates and the gain K."""

    r_hat: np.ndarray
    sbar_hat: np.ndarray
    w_hat: np.ndarray
    gain: np.ndarray


def build_features(
    cur_pos,
    cur_vel,
    prev_pos,
    prev_vel,
    xhat_prev,
    xbar_prev,
    xbar_prev2,
    dt: float,
) -> np.ndarray:
    """Assemble the scaled 22-entry feature vector for one filter step."""
    feat = np.empty(FEATURE_DIM)
    feat[FEAT_CUR_POS] = np.asarray(cur_pos) / POS_SCALE
    feat[FEAT_CUR_VEL] = np.asarray(cur_vel) / VEL_SCALE
    feat[FEAT_PREV_POS] = np.asarray(prev_pos) / POS_SCALE
    feat[FEAT_PREV_VEL] = np.asarray(prev_vel) / VEL_SCALE
    feat[FEAT_XHAT_PREV] = np.asarray(xhat_prev) / POS_SCALE
    feat[FEAT_XBAR_PREV] = np.asarray(xbar_prev) / POS_SCALE
    feat[FEAT_XBAR_PREV2] = np.asarray(xbar_prev2) / POS_SCALE
    feat[FEAT_DT] = dt
    if not np.all(np.isfinite(feat)):
        raise DataError("feature vector contains non-finite values")
    return feat


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru_forward(x, h, w_ih, w_hh, b_ih, b_hh):
    m = h.shape[0]
    gi = w_ih @ x + b_ih
    gh = w_hh @ h + b_hh
    r = _sigmoid(gi[:m] + gh[:m])
    z = _sigmoid(gi[m : 2 * m] + gh[m : 2 * m])
    hn_lin = gh[2 * m :]
    n = np.tanh(gi[2 * m :] + r * hn_lin)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, hn_lin)


def _gru_backward(dh_new, cache, w_ih, w_hh, grads, prefix):
    x, h, r, z, n, hn_lin = cache
    dz = dh_new * (h - n)
    dn = dh_new * (1.0 - z)
    dh = dh_new * z

    da_n = dn * (1.0 - n * n)
    dr = da_n * hn_lin
    dhn_lin = da_n * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)

    dgi = np.concatenate([da_r, da_z, da_n])
    dgh = np.concatenate([da_r, da_z, dhn_lin])
    grads[prefix + ".w_ih"] += np.outer(dgi, x)
    grads[prefix + ".b_ih"] += dgi
    grads[prefix + ".w_hh"] += np.outer(dgh, h)
    grads[prefix + ".b_hh"] += dgh
    dx = w_ih.T @ dgi
    dh = dh + w_hh.T @ dgh
    return dx, dh


def _psd_from_six(v):
    lower = np.zeros((3, 3))
    lower[_TRIL_ROWS, _TRIL_COLS] = v
    return lower @ lower.T + PSD_FLOOR * np.eye(3), lower


def _psd_backward(d_mat, lower):
    d_lower = (d_mat + d_mat.T) @ lower
    return d_lower[_TRIL_ROWS, _TRIL_COLS]


def _forward_step_cached(params: GainNetworkParams, state: GainNetworkState, feat):
    p = params.tensors
    feat = np.asarray(feat, dtype=float)
    if feat.shape != (FEATURE_DIM,):
        raise DataError(f"feature vector must have shape ({FEATURE_DIM},)")

    embedded = np.tanh(p["embed.w"] @ feat + p["embed.b"])
    h1, c1 = _gru_forward(
        embedded, state.h1, p["gru1.w_ih"], p["gru1.w_hh"], p["gru1.b_ih"], p["gru1.b_hh"]
    )
    v_r = p["head_r.w"] @ h1 + p["head_r.b"]

    f12 = np.tanh(p["fc12.w"] @ h1 + p["fc12.b"])
    h2, c2 = _gru_forward(
        f12, state.h2, p["gru2.w_ih"], p["gru2.w_hh"], p["gru2.b_ih"], p["gru2.b_hh"]
    )
    v_s = p["head_s.w"] @ h2 + p["head_s.b"]

    joined = np.concatenate([h1, h2])
    f23 = np.tanh(p["fc23.w"] @ joined + p["fc23.b"])
    h3, c3 = _gru_forward(
        f23, state.h3, p["gru3.w_ih"], p["gru3.w_hh"], p["gru3.b_ih"], p["gru3.b_hh"]
    )
    v_w = p["head_w.w"] @ h3 + p["head_w.b"]

    r_hat, l_r = _psd_from_six(v_r)
    sbar_hat, l_s = _psd_from_six(v_s)
    w_hat, l_w = _psd_from_six(v_w)
    try:
        np.linalg.cholesky(w_hat)  # guaranteed by the floor; asserted anyway
    except np.linalg.LinAlgError as exc:
        raise NumericalError("estimated innovation covariance W not PD") from exc
    w_inv = np.linalg.inv(w_hat)
    gain = sbar_hat @ w_inv

    outputs = UncertaintyOutputs(r_hat, sbar_hat, w_hat, gain)
    new_state = GainNetworkState(h1, h2, h3)
    cache = {
        "feat": feat,
        "embedded": embedded,
        "gru1": c1,
        "h1": h1,
        "f12": f12,
        "gru2": c2,
        "h2": h2,
        "joined": joined,
        "f23": f23,
        "gru3": c3,
        "h3": h3,
        "l_r": l_r,
        "l_s": l_s,
        "l_w": l_w,
        "sbar_hat": sbar_hat,
        "w_inv": w_inv,
    }
    return outputs, new_state, cache


def _backward_step(params, cache, d_out, d_state, grads):
    """Reverse one step. d_out = (dR, dS, dW, dK); d_state = carried hidden grads.

    Parameter gradients are accumulated into ``grads`` in place; returns
    (d_feat, d_state_prev).
    """
    p = params.tensors
    d_r, d_s, d_w, d_k = d_out
    dh1_c, dh2_c, dh3_c = d_state

    w_inv = cache["w_inv"]
    sbar = cache["sbar_hat"]
    # K = S W^-1:  dS += dK W^-T,  dW -= W^-T S^T dK W^-T
    d_s_tot = d_s + d_k @ w_inv.T
    d_w_tot = d_w - w_inv.T @ (sbar.T @ d_k) @ w_inv.T

    dv_r = _psd_backward(d_r, cache["l_r"])
    dv_s = _psd_backward(d_s_tot, cache["l_s"])
    dv_w = _psd_backward(d_w_tot, cache["l_w"])

    h1, h2, h3 = cache["h1"], cache["h2"], cache["h3"]
    grads["head_w.w"] += np.outer(dv_w, h3)
    grads["head_w.b"] += dv_w
    dh3 = dh3_c + p["head_w.w"].T @ dv_w
    df23, dh3_prev = _gru_backward(
        dh3, cache["gru3"], p["gru3.w_ih"], p["gru3.w_hh"], grads, "gru3"
    )
    dpre23 = df23 * (1.0 - cache["f23"] ** 2)
    grads["fc23.w"] += np.outer(dpre23, cache["joined"])
    grads["fc23.b"] += dpre23
    djoined = p["fc23.w"].T @ dpre23
    n1 = h1.shape[0]

    grads["head_s.w"] += np.outer(dv_s, h2)
    grads["head_s.b"] += dv_s
    dh2 = dh2_c + p["head_s.w"].T @ dv_s + djoined[n1:]
    df12, dh2_prev = _gru_backward(
        dh2, cache["gru2"], p["gru2.w_ih"], p["gru2.w_hh"], grads, "gru2"
    )
    dpre12 = df12 * (1.0 - cache["f12"] ** 2)
    grads["fc12.w"] += np.outer(dpre12, h1)
    grads["fc12.b"] += dpre12

    grads["head_r.w"] += np.outer(dv_r, h1)
    grads["head_r.b"] += dv_r
    dh1 = dh1_c + p["head_r.w"].T @ dv_r + djoined[:n1] + p["fc12.w"].T @ dpre12
    de, dh1_prev = _gru_backward(
        dh1, cache["gru1"], p["gru1.w_ih"], p["gru1.w_hh"], grads, "gru1"
    )
    dpre_e = de * (1.0 - cache["embedded"] ** 2)
    grads["embed.w"] += np.outer(dpre_e, cache["feat"])
    grads["embed.b"] += dpre_e
    d_feat = p["embed.w"].T @ dpre_e
    return d_feat, (dh1_prev, dh2_prev, dh3_prev)


def forward_step(
    params: GainNetworkParams, state: GainNetworkState, feat
) -> Tuple[UncertaintyOutputs, GainNetworkState]:
    """One recurrent step: features in, (R, S, W, K) and new state out."""
    state.check_matches(params)
    outputs, new_state, _ = _forward_step_cached(params, state, feat)
    return outputs, new_state


def forward_sequence(params: GainNetworkParams, feats) -> List[UncertaintyOutputs]:
    """Fold forward_step over a feature sequence from a zeroed state."""
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] != FEATURE_DIM:
        raise DataError(f"expected a nonempty (T, {FEATURE_DIM}) feature array")
    state = GainNetworkState.zeros(params)
    outputs = []
    for t in range(feats.shape[0]):
        out, state, _ = _forward_step_cached(params, state, feats[t])
        outputs.append(out)
    return outputs


def backward_sequence(
    params: GainNetworkParams,
    feats,
    upstream: Sequence[Optional[Tuple]],
) -> dict:
    """Exact reverse-mode gradient of the unrolled sequence.

    ``upstream[t]`` is a (dR, dS, dW, dK) tuple of 3x3 gradients with
    respect to step t's outputs (None means all-zero). Returns parameter
    gradients keyed like the manifest.
    """
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
        raise DataError(f"expected a (T, {FEATURE_DIM}) feature array")
    if len(upstream) != feats.shape[0]:
        raise DataError(
            f"upstream gradient count {len(upstream)} != sequence length {feats.shape[0]}"
        )
    state = GainNetworkState.zeros(params)
    caches = []
    for t in range(feats.shape[0]):
        _, state, cache = _forward_step_cached(params, state, feats[t])
        caches.append(cache)

    total = params.zeros_like_grads()
    zero3 = np.zeros((3, 3))
    d_state = tuple(np.zeros(s) for s in params.hidden_sizes)
    for t in range(feats.shape[0] - 1, -1, -1):
        up = upstream[t]
        if up is None:
            d_out = (zero3, zero3, zero3, zero3)
        else:
            d_out = tuple(
                zero3 if g is None else np.asarray(g, dtype=float) for g in up
            )
            if any(g.shape != (3, 3) for g in d_out):
                raise DataError(f"upstream gradient at step {t} must be 3x3")
        _, d_state = _backward_step(params, caches[t], d_out, d_state, total)
    return total


def init_params(
    seed: int, hidden_sizes=DEFAULT_HIDDEN_SIZES
) -> GainNetworkParams:
    """Seeded initialization: weights U(+-1/sqrt(fan_in)), biases zero.

    The PSD heads get unit diagonal biases so the initial R, S, W sit near
    the identity and the initial gain is close to I (measurement-trusting)
    instead of the ill-conditioned near-floor regime.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in canonical_manifest(hidden_sizes):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    for head in ("head_r.b", "head_s.b", "head_w.b"):
        tensors[head][list(_TRIL_DIAG)] = 1.0
    return GainNetworkParams(tensors)


def checkpoint_bytes(params: GainNetworkParams) -> bytes:
    """Serialize: magic, version, manifest, float64-LE payload."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION)]
    manifest = params.manifest()
    parts.append(struct.pack("<I", len(manifest)))
    for name, shape in manifest:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    for _, tensor in params.tensors.items():
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_nbytes(params: GainNetworkParams) -> int:
    """Exact size of the serialized checkpoint (the per-exchange payload)."""
    header = len(CHECKPOINT_MAGIC) + 1 + 4
    for name, shape in params.manifest():
        header += 4 + len(name.encode("utf-8")) + 4 + 4 * len(shape)
    return header + 8 * params.count()


def save_params(params: GainNetworkParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_params(path) -> GainNetworkParams:
    """Parse and validate a checkpoint; bit-identical to what was saved."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a gain-network checkpoint")
    version = reader.take(1)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = reader.u32()
    manifest = []
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        manifest.append((name, shape))

    by_name = dict(manifest)
    try:
        h1 = by_name["embed.w"][0]
        h2 = by_name["fc12.w"][0]
        h3 = by_name["fc23.w"][0]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint manifest missing tensor {exc}") from exc
    if manifest != canonical_manifest((h1, h2, h3)):
        raise CheckpointError(
            f"checkpoint manifest mismatch for hidden sizes ({h1}, {h2}, {h3})"
        )

    tensors = {}
    for name, shape in manifest:
        size = int(np.prod(shape)) if shape else 1
        raw = reader.take(8 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if reader.pos != len(reader.blob):
        raise CheckpointError(
            f"{len(reader.blob) - reader.pos} trailing bytes after payload"
        )
    try:
        return GainNetworkParams(tensors)
    except DataError as exc:
        raise CheckpointError(str(exc)) from exc
