"""Lie-algebra poses (sl(3) homographies, se(3) rigid motions), warps and rays.

Conventions
-----------
* sl(3) coefficients act on patch-normalised coordinates in which the
  canonical patch is the square [-1, 1]^2.  Generator order: x-translation,
  y-translation, rotation, isotropic scale, anisotropic stretch, shear,
  x-perspective, y-perspective (see ``SL3_GENERATORS``).
* se(3) coefficients are ``(rho_x, rho_y, rho_z, omega_x, omega_y, omega_z)``:
  translation part first, then the rotation vector.  ``exp_se3`` maps camera
  coordinates to world coordinates.
* Cameras are right-handed and look down +z; pixel (0, 0) is the top-left
  pixel centre and ``u`` indexes columns.

Every map accepts either numpy arrays (returns arrays) or ``Value`` objects
(returns Values recorded on the tape, so poses receive exact gradients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import (ContractViolation, DegenerateConfigurationError, FormatError,
                     PointAtInfinityError)

SL3_GENERATOR_NAMES = ("trans_x", "trans_y", "rotation", "scale", "stretch", "shear",
                       "persp_x", "persp_y")

SL3_GENERATORS = np.array([
    [[0, 0, 1], [0, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 0, 1], [0, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    [[1, 0, 0], [0, 1, 0], [0, 0, -2]],
    [[1, 0, 0], [0, -1, 0], [0, 0, 0]],
    [[0, 1, 0], [1, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 0, 0], [1, 0, 0]],
    [[0, 0, 0], [0, 0, 0], [0, 1, 0]],
], dtype=np.float64)

# hat(w) = w @ _SO3_HAT.reshape(3, 9)
_SO3_HAT = np.array([
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=np.float64)

UNIT_SQUARE_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

_TAYLOR_ORDER = 14
_SCALED_NORM = 0.25


def _unwrap(result, wrap):
    return result if wrap else result.data


def hat_sl3(p):
    """Lie-algebra matrix sum_i p_i G_i for p of shape (..., 8)."""
    wrap = isinstance(p, Value)
    p = ad._lift(p)
    G = SL3_GENERATORS.reshape(8, 9).astype(p.dtype)
    A = ad.reshape(ad.matmul(p, G), p.shape[:-1] + (3, 3))
    return _unwrap(A, wrap)


def expm_series(A, scaled_norm=_SCALED_NORM, order=_TAYLOR_ORDER):
    """Matrix exponential by scaling and squaring with a truncated Taylor series.

    Works on (..., n, n) arrays or Values; every step is a tape primitive so
    the derivative of the map itself is available.
    """
    wrap = isinstance(A, Value)
    A = ad._lift(A)
    n = A.shape[-1]
    norm = float(np.max(np.abs(A.data).sum(axis=-1), initial=0.0))
    s = 0 if norm <= scaled_norm else int(math.ceil(math.log2(norm / scaled_norm)))
    X = A * (0.5**s) if s else A
    eye = np.eye(n, dtype=A.dtype)
    # Horner: I + X(I + X/2(I + X/3(...)))
    E = eye + X * (1.0 / order)
    for k in range(order - 1, 0, -1):
        E = eye + ad.matmul(X, E) * (1.0 / k)
    for _ in range(s):
        E = ad.matmul(E, E)
    return _unwrap(E, wrap)


def exp_sl3(p):
    """Homography exp(sum_i p_i G_i); p has shape (8,) or (..., 8)."""
    wrap = isinstance(p, Value)
    p = ad._lift(p)
    if p.shape[-1] != 8:
        raise ContractViolation(f"sl(3) vectors have 8 coefficients, got {p.shape[-1]}")
    return _unwrap(expm_series(hat_sl3(p)), wrap)


# -- se(3) ---------------------------------------------------------------

# theta < _SERIES_THETA uses the power series; its derivative stays accurate
_SERIES_THETA = 0.1
_SERIES_TERMS = 8


def _series(x, offset, derivative=False):
    # sum_k (-1)^k x^k / (2k + offset)!
    out = np.zeros_like(x)
    for k in range(_SERIES_TERMS - 1, -1, -1):
        c = (-1) ** k / math.factorial(2 * k + offset)
        if derivative:
            c = c * k
            if k == 0:
                continue
            out = out + c * x ** (k - 1)
        else:
            out = out + c * x**k
    return out


def _se3_coeffs_f(theta_sq):
    small = theta_sq < _SERIES_THETA**2
    th = np.sqrt(np.where(small, 1.0, theta_sq))
    A = np.where(small, _series(theta_sq, 1), np.sin(th) / th)
    B = np.where(small, _series(theta_sq, 2), (1 - np.cos(th)) / th**2)
    C = np.where(small, _series(theta_sq, 3), (th - np.sin(th)) / th**3)
    return np.stack([A, B, C], axis=-1)


def _se3_coeffs_b(g, out, theta_sq, needs):
    small = theta_sq < _SERIES_THETA**2
    th = np.sqrt(np.where(small, 1.0, theta_sq))
    s, c = np.sin(th), np.cos(th)
    # d/d(theta^2) = (d/dtheta) / (2 theta)
    dA = (th * c - s) / (2 * th**3)
    dB = (th * s - 2 * (1 - c)) / (2 * th**4)
    dC = ((1 - c) / th**3 - 3 * (th - s) / th**4) / (2 * th)
    dA = np.where(small, _series(theta_sq, 1, True), dA)
    dB = np.where(small, _series(theta_sq, 2, True), dB)
    dC = np.where(small, _series(theta_sq, 3, True), dC)
    return [g[..., 0] * dA + g[..., 1] * dB + g[..., 2] * dC]


def se3_coefficients(theta_sq):
    """Rodrigues coefficients (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) of t^2."""
    return ad._apply("se3_coeffs", _se3_coeffs_f, _se3_coeffs_b, [ad._lift(theta_sq)])


def hat_so3(w):
    wrap = isinstance(w, Value)
    w = ad._lift(w)
    W = ad.reshape(ad.matmul(w, _SO3_HAT.reshape(3, 9).astype(w.dtype)), w.shape[:-1] + (3, 3))
    return _unwrap(W, wrap)


def exp_se3_rt(p):
    """Rotation (..., 3, 3) and translation (..., 3) of exp(p) for p of shape (..., 6)."""
    wrap = isinstance(p, Value)
    p = ad._lift(p)
    if p.shape[-1] != 6:
        raise ContractViolation(f"se(3) vectors have 6 coefficients, got {p.shape[-1]}")
    rho = p[..., :3]
    omega = p[..., 3:]
    W = hat_so3(omega)
    W2 = ad.matmul(W, W)
    coeffs = se3_coefficients(ad.sum_(omega * omega, axis=-1))
    A = ad.reshape(coeffs[..., 0], coeffs.shape[:-1] + (1, 1))
    B = ad.reshape(coeffs[..., 1], coeffs.shape[:-1] + (1, 1))
    C = ad.reshape(coeffs[..., 2], coeffs.shape[:-1] + (1, 1))
    eye = np.eye(3, dtype=p.dtype)
    R = eye + A * W + B * W2
    V = eye + B * W + C * W2
    t = ad.reshape(ad.matmul(V, ad.reshape(rho, rho.shape + (1,))), rho.shape)
    if wrap:
        return R, t
    return R.data, t.data


def exp_se3(p):
    """4x4 rigid transform(s) exp(p) as a numpy array."""
    R, t = exp_se3_rt(np.asarray(p, dtype=np.float64))
    T = np.zeros(R.shape[:-2] + (4, 4))
    T[..., :3, :3] = R
    T[..., :3, 3] = t
    T[..., 3, 3] = 1.0
    return T


def log_so3(R):
    """Rotation vector of a rotation matrix (angle < pi)."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = math.acos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2
    if theta < 1e-8:
        return w
    return w * theta / math.sin(theta)


def log_se3(T):
    """se(3) coefficients of a 4x4 rigid transform (inverse of ``exp_se3``)."""
    T = np.asarray(T, dtype=np.float64)
    w = log_so3(T[:3, :3])
    W = _SO3_HAT.transpose(1, 2, 0) @ w
    coeffs = _se3_coeffs_f(np.array(w @ w))
    V = np.eye(3) + coeffs[1] * W + coeffs[2] * (W @ W)
    rho = np.linalg.solve(V, T[:3, 3])
    return np.concatenate([rho, w])


# -- warps -----------------------------------------------------------------


def apply_homography(H, x):
    """Warp points x (..., 2) by H (..., 3, 3): H [x; 1] then perspective divide."""
    wrap = isinstance(H, Value) or isinstance(x, Value)
    x = ad._lift(x)
    H = ad._lift(H, x)
    ones = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    xh = ad.concat([x, ones], axis=-1)
    y = ad.matmul(xh, ad.transpose(H, tuple(range(H.ndim - 2)) + (H.ndim - 1, H.ndim - 2)))
    return _unwrap(ad.homogeneous_divide(y), wrap)


def warp2d(u, p):
    """Warp normalised coordinates u (..., 2) by the homography exp_sl3(p)."""
    wrap = isinstance(u, Value) or isinstance(p, Value)
    p = ad._lift(p)
    out = apply_homography(exp_sl3(p), u)
    return out if wrap else np.asarray(out.data if isinstance(out, Value) else out)


def sl3_pose_error(p_est, p_gt):
    """Mean displacement of the canonical square's corners between two warps."""
    try:
        a = warp2d(UNIT_SQUARE_CORNERS, np.asarray(p_est, dtype=np.float64))
        b = warp2d(UNIT_SQUARE_CORNERS, np.asarray(p_gt, dtype=np.float64))
    except PointAtInfinityError:
        return float("nan")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


# -- cameras ---------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ContractViolation("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, fov_deg):
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def directions(self, u):
        """Unnormalised camera-frame directions (u - c) / f with z = 1 for pixels u (B, 2)."""
        u = np.asarray(u, dtype=np.float64)
        d = np.ones(u.shape[:-1] + (3,))
        d[..., 0] = (u[..., 0] - self.cx) / self.fx
        d[..., 1] = (u[..., 1] - self.cy) / self.fy
        return d

    def pixel_grid(self):
        """All pixel coordinates (H*W, 2) in row-major order."""
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        return np.stack([cols.ravel(), rows.ravel()], axis=-1).astype(np.float64)


def transform_points(R, t, x):
    """R x + t for points x (..., 3) with broadcastable R (..., 3, 3), t (..., 3)."""
    wrap = any(isinstance(v, Value) for v in (R, t, x))
    x = ad._lift(x)
    R = ad._lift(R, x)
    t = ad._lift(t, x)
    xc = ad.reshape(x, x.shape + (1,))
    y = ad.reshape(ad.matmul(R, xc), x.shape) + t
    return _unwrap(y, wrap)


def ray_points(u, intr, p, depths):
    """World points exp_se3(p) (t_i * d(u)) for pixels u (B, 2) and depths (B, N) or (N,)."""
    wrap = isinstance(p, Value)
    d = intr.directions(np.atleast_2d(u))
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 1:
        depths = np.broadcast_to(depths, (d.shape[0], depths.shape[0]))
    cam = depths[..., None] * d[:, None, :]
    R, t = exp_se3_rt(p if wrap else np.asarray(p, dtype=np.float64))
    if wrap:
        return transform_points(R, t, cam)
    return cam @ R.T + t


# -- evaluation --------------------------------------------------------------


@dataclass
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, x):
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation


@dataclass
class PoseErrors:
    alignment: Sim3
    rotation_deg: np.ndarray
    translation: np.ndarray

    @property
    def mean_rotation_deg(self):
        return float(np.mean(self.rotation_deg))

    @property
    def mean_translation(self):
        return float(np.mean(self.translation))


def _as_rt(poses):
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim == 2 and poses.shape[-1] == 6:
        return exp_se3_rt(poses)
    if poses.ndim == 3 and poses.shape[-2:] in ((4, 4), (3, 4)):
        return poses[:, :3, :3], poses[:, :3, 3]
    raise ContractViolation("poses must be (M, 6) se(3) vectors or (M, 4, 4) matrices")


def rotation_angle_deg(Ra, Rb):
    """Geodesic angle between rotations, accurate near zero."""
    diff = np.linalg.norm(np.asarray(Ra) - np.asarray(Rb), axis=(-2, -1))
    return np.degrees(2 * np.arcsin(np.clip(diff / (2 * math.sqrt(2)), 0.0, 1.0)))


def umeyama_sim3(src, dst):
    """Similarity (s, R, t) minimising sum |s R src_i + t - dst_i|^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise DegenerateConfigurationError("Sim(3) alignment needs at least 3 points")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    for pts in (xs, xd):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
            raise DegenerateConfigurationError("camera centres are collinear or coincident")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / (np.sum(xs**2) / len(src)))
    t = mu_d - scale * R @ mu_s
    return Sim3(scale, R, t)


def procrustes_sim3(est, gt):
    """Align estimated camera centres to ground truth and measure pose errors.

    Returns per-pose geodesic rotation error (degrees) and aligned centre
    distance; see ``PoseErrors.mean_rotation_deg`` / ``mean_translation``.
    """
    Re, te = _as_rt(est)
    Rg, tg = _as_rt(gt)
    if len(te) != len(tg):
        raise ContractViolation("pose lists differ in length")
    sim = umeyama_sim3(te, tg)
    aligned_t = sim.apply(te)
    aligned_R = sim.rotation @ Re
    rot = rotation_angle_deg(aligned_R, Rg)
    trans = np.linalg.norm(aligned_t - tg, axis=-1)
    return PoseErrors(sim, rot, trans)


def align_pose_to_estimate(sim, R_gt, t_gt):
    """Map a ground-truth camera into the estimated frame given est->gt alignment ``sim``."""
    R = sim.rotation.T @ R_gt
    t = sim.rotation.T @ (np.asarray(t_gt) - sim.translation) / sim.scale
    return R, t


# -- pose files --------------------------------------------------------------

_POSE_HEADERS = {
    8: "sl3 coefficients: " + " ".join(SL3_GENERATOR_NAMES),
    6: "se3 coefficients: rho_x rho_y rho_z omega_x omega_y omega_z",
}


def save_poses(path, poses):
    """One pose per line, whitespace separated, with a comment header naming the order."""
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    if poses.shape[-1] not in _POSE_HEADERS:
        raise ContractViolation("pose vectors must have 6 or 8 coefficients")
    np.savetxt(path, poses, fmt="%.17g", header=_POSE_HEADERS[poses.shape[-1]])


def load_poses(path, dim=None):
    try:
        poses = np.atleast_2d(np.loadtxt(path, dtype=np.float64, comments="#"))
    except ValueError as exc:
        raise FormatError(f"bad pose file {path}: {exc}") from exc
    if poses.shape[-1] not in _POSE_HEADERS or (dim is not None and poses.shape[-1] != dim):
        raise FormatError(f"pose file {path} has {poses.shape[-1]} columns")
    return poses
