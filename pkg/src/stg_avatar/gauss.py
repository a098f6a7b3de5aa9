"""Spacetime Gaussian parameters and their evaluation at a normalized time.

All operations are vectorized over a leading splat axis. A single splat is
just a set of size one.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numba
import numpy as np

DEGENERATE_QUAT_NORM = 1e-8
SH_COEFFS = 9


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class SpacetimeGaussians:
    canonical_pos: np.ndarray        # (N, 3)
    motion_coeffs: np.ndarray        # (N, n_p, 3), k = 1..n_p
    temporal_center_pos: np.ndarray  # (N,)
    rot_coeffs: np.ndarray           # (N, n_q + 1, 4), wxyz, k = 0..n_q
    temporal_center_rot: np.ndarray  # (N,)
    log_scales: np.ndarray           # (N, 3)
    opacity_logit: np.ndarray        # (N,)
    temporal_sharpness: np.ndarray   # (N,)
    appearance_feat: np.ndarray      # (N, F)
    sh_coeffs: np.ndarray            # (N, 9, 3), only read by the SH color mode

    @classmethod
    def create(cls, positions, *, n_p=2, n_q=1, feat_dim=8, log_scale=-3.0,
               opacity=0.5, t_center=0.0):
        """Static splats at ``positions`` with identity rotation and zero motion."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        rot = np.zeros((n, n_q + 1, 4))
        rot[:, 0, 0] = 1.0
        return cls(
            canonical_pos=positions.copy(),
            motion_coeffs=np.zeros((n, n_p, 3)),
            temporal_center_pos=np.full(n, float(t_center)),
            rot_coeffs=rot,
            temporal_center_rot=np.full(n, float(t_center)),
            log_scales=np.broadcast_to(np.asarray(log_scale, dtype=np.float64), (n, 3)).copy(),
            opacity_logit=np.full(n, float(logit(opacity))),
            temporal_sharpness=np.zeros(n),
            appearance_feat=np.zeros((n, feat_dim)),
            sh_coeffs=np.zeros((n, SH_COEFFS, 3)),
        )

    def __len__(self):
        return len(self.canonical_pos)

    @property
    def n_p(self) -> int:
        return self.motion_coeffs.shape[1]

    @property
    def n_q(self) -> int:
        return self.rot_coeffs.shape[1] - 1

    @property
    def feat_dim(self) -> int:
        return self.appearance_feat.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "SpacetimeGaussians":
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})

    def subset(self, idx) -> "SpacetimeGaussians":
        return replace(self, **{k: v[idx].copy() for k, v in self.arrays().items()})

    def concat(self, other: "SpacetimeGaussians") -> "SpacetimeGaussians":
        return replace(self, **{k: np.concatenate([v, getattr(other, k)])
                                for k, v in self.arrays().items()})

    def validate(self) -> None:
        n = len(self)
        for name, arr in self.arrays().items():
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.temporal_sharpness < 0):
            raise ValueError("temporal_sharpness must be >= 0")


@dataclass
class PosedGaussians:
    """Splats at one time instant, in posed world space."""
    positions: np.ndarray     # (N, 3)
    covariances: np.ndarray   # (N, 3, 3)
    opacities: np.ndarray     # (N,)
    appearance_feat: np.ndarray
    rotations: np.ndarray     # (N, 3, 3) full orientation used for the covariance

    def __len__(self):
        return len(self.positions)


@dataclass
class PosedGrads:
    positions: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray
    appearance_feat: np.ndarray | None = None

    @classmethod
    def zeros(cls, n: int, feat_dim: int = 0) -> "PosedGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros(n),
                   np.zeros((n, feat_dim)) if feat_dim else None)


def _powers(dt: np.ndarray, n: int) -> np.ndarray:
    """(N, n + 1) matrix of dt**k for k = 0..n."""
    out = np.ones((len(dt), n + 1))
    for k in range(1, n + 1):
        out[:, k] = out[:, k - 1] * dt
    return out


def _poly(pw: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """sum_k pw[:, k] * coeffs[:, k, :]."""
    out = pw[:, 0, None] * coeffs[:, 0]
    for k in range(1, pw.shape[1]):
        out += pw[:, k, None] * coeffs[:, k]
    return out


def eval_motion_offset(g: SpacetimeGaussians, t) -> np.ndarray:
    dt = np.asarray(t, dtype=np.float64) - g.temporal_center_pos
    dt = np.broadcast_to(dt, (len(g),))
    return _poly(_powers(dt, g.n_p)[:, 1:], g.motion_coeffs)


def eval_rotation(g: SpacetimeGaussians, t):
    """Unit quaternions at ``t`` plus a mask of degenerate (near-zero) evaluations.

    Degenerate splats fall back to the identity quaternion.
    """
    dt = np.asarray(t, dtype=np.float64) - g.temporal_center_rot
    dt = np.broadcast_to(dt, (len(g),))
    pw = _powers(dt, g.n_q)
    q_raw = _poly(pw, g.rot_coeffs)
    norm = np.linalg.norm(q_raw, axis=1)
    degenerate = norm < DEGENERATE_QUAT_NORM
    q = q_raw / np.where(degenerate, 1.0, norm)[:, None]
    q[degenerate] = (1.0, 0.0, 0.0, 0.0)
    return q, degenerate


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backprop dL/dR through ``quat_to_rotmat`` (q taken as unnormalized input)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = dR
    dw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    dx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance_from_rotmat(R: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    # M = R S; Sigma = M M^T is symmetric by construction of the product below
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    if R.ndim == 3:
        return _cov_batch(np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(s2))
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@numba.njit(cache=True)
def _cov_batch(R, s2):
    n = R.shape[0]
    cov = np.empty((n, 3, 3))
    for i in range(n):
        for a in range(3):
            for b in range(a, 3):
                v = R[i, a, 0] * s2[i, 0] * R[i, b, 0]
                v += R[i, a, 1] * s2[i, 1] * R[i, b, 1]
                v += R[i, a, 2] * s2[i, 2] * R[i, b, 2]
                cov[i, a, b] = v
                cov[i, b, a] = v
    return cov


def build_covariance(q: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    return covariance_from_rotmat(quat_to_rotmat(q), log_scales)


def temporal_opacity(g: SpacetimeGaussians, t) -> np.ndarray:
    dt = np.asarray(t, dtype=np.float64) - g.temporal_center_pos
    return sigmoid(g.opacity_logit) * np.exp(-g.temporal_sharpness * dt * dt)


def pose_gaussians(g: SpacetimeGaussians, t, base_positions=None,
                   base_rotations=None) -> tuple[PosedGaussians, np.ndarray]:
    """Evaluate every splat at time ``t``.

    ``base_positions`` is the rigidly deformed position (canonical position when
    omitted) and ``base_rotations`` an optional per-splat rotation applied on
    top of the polynomial quaternion. Returns the posed splats and the
    degenerate-rotation mask.
    """
    if base_positions is None:
        base_positions = g.canonical_pos
    q, degenerate = eval_rotation(g, t)
    R = quat_to_rotmat(q)
    if base_rotations is not None:
        R = base_rotations @ R
    posed = PosedGaussians(
        positions=base_positions + eval_motion_offset(g, t),
        covariances=covariance_from_rotmat(R, g.log_scales),
        opacities=temporal_opacity(g, t),
        appearance_feat=g.appearance_feat,
        rotations=R,
    )
    return posed, degenerate


def grad_gaussian_params(g: SpacetimeGaussians, t, upstream: PosedGrads,
                         base_rotations=None, position_jacobian=None) -> dict[str, np.ndarray]:
    """Chain rule from posed-splat gradients to every parameter array of ``g``.

    ``position_jacobian`` is d(base position)/d(canonical_pos), (N, 3, 3);
    identity when omitted. Skinning weights and bone rotations are constants.
    """
    n = len(g)
    t = np.asarray(t, dtype=np.float64)
    grads = {k: np.zeros_like(v) for k, v in g.arrays().items()}

    # position: mu = X_L(x_c) + sum_k b_k dt^k
    dmu = upstream.positions
    if position_jacobian is None:
        grads["canonical_pos"] = dmu.copy()
    else:
        grads["canonical_pos"] = np.einsum("nij,ni->nj", position_jacobian, dmu)
    dt0 = np.broadcast_to(t - g.temporal_center_pos, (n,))
    pw = _powers(dt0, g.n_p)
    grads["motion_coeffs"] = pw[:, 1:, None] * dmu[:, None, :]
    # d/d mu0 of sum_k b_k (t - mu0)^k = -sum_k k b_k dt^(k-1)
    ks = np.arange(1, g.n_p + 1)
    dpoly = np.einsum("k,nk,nkd->nd", ks, pw[:, :-1], g.motion_coeffs)
    grads["temporal_center_pos"] = -np.einsum("nd,nd->n", dpoly, dmu)

    # opacity: sigmoid(l) * exp(-s dt^2)
    base = sigmoid(g.opacity_logit)
    decay = np.exp(-g.temporal_sharpness * dt0 * dt0)
    sig_t = base * decay
    dsig = upstream.opacities
    grads["opacity_logit"] = dsig * sig_t * (1.0 - base)
    grads["temporal_sharpness"] = -dsig * sig_t * dt0 * dt0
    grads["temporal_center_pos"] += dsig * sig_t * 2.0 * g.temporal_sharpness * dt0

    # covariance: Sigma = R_tot S^2 R_tot^T, R_tot = B R(q)
    dtr = np.broadcast_to(t - g.temporal_center_rot, (n,))
    pq = _powers(dtr, g.n_q)
    q_raw = np.einsum("nk,nkd->nd", pq, g.rot_coeffs)
    norm = np.linalg.norm(q_raw, axis=1)
    degenerate = norm < DEGENERATE_QUAT_NORM
    q = q_raw / np.where(degenerate, 1.0, norm)[:, None]
    q[degenerate] = (1.0, 0.0, 0.0, 0.0)
    Rq = quat_to_rotmat(q)
    R = Rq if base_rotations is None else base_rotations @ Rq
    s2 = np.exp(2.0 * g.log_scales)
    G = upstream.covariances
    G = 0.5 * (G + np.swapaxes(G, 1, 2))
    # dL/dR_tot = 2 G R S^2
    dR = 2.0 * np.einsum("nij,njk,nk->nik", G, R, s2)
    # dL/d(s_j^2) = (R^T G R)_jj ; d(s_j^2)/d log s_j = 2 s_j^2
    RtGR = np.einsum("nij,nik,nkj->nj", R, G, R)
    grads["log_scales"] = 2.0 * s2 * RtGR
    dRq = dR if base_rotations is None else np.einsum("nji,njk->nik", base_rotations, dR)
    dq = rotmat_grad_to_quat(q, dRq)
    # through normalization: (I - q q^T) / |q_raw|
    dq_raw = (dq - q * np.einsum("nd,nd->n", q, dq)[:, None]) / np.where(degenerate, 1.0, norm)[:, None]
    dq_raw[degenerate] = 0.0
    grads["rot_coeffs"] = pq[:, :, None] * dq_raw[:, None, :]
    if g.n_q >= 1:
        kq = np.arange(1, g.n_q + 1)
        dqpoly = np.einsum("k,nk,nkd->nd", kq, pq[:, :-1], g.rot_coeffs[:, 1:])
        grads["temporal_center_rot"] = -np.einsum("nd,nd->n", dqpoly, dq_raw)

    if upstream.appearance_feat is not None:
        grads["appearance_feat"] = upstream.appearance_feat.copy()
    return grads
