"""Pinhole camera, SE(3) poses, PnP + RANSAC and Levenberg-Marquardt pose refinement.

Poses map world coordinates into the camera frame: ``X_c = R @ X_w + t``.
Twists are ordered ``(omega, v)``: rotation vector first, translation second,
and updates are applied on the left, ``pose <- exp(delta) * pose``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

MIN_DEPTH = 1e-9
BEHIND_RESIDUAL = 100.0  # px; squared this is the 1e4 px^2 penalty


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


class InsufficientDataError(GeometryError):
    pass


class PoseEstimationError(RuntimeError):
    """RANSAC found no pose supported by at least four inliers."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


# TUM calibration for the freiburg1 and freiburg2 sensors
FR1 = CameraIntrinsics(517.3, 516.5, 318.6, 255.3, 5000.0)
FR2 = CameraIntrinsics(520.9, 521.0, 325.1, 249.7, 5000.0)
PRESETS = {"fr1": FR1, "fr2": FR2}


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        s = np.linalg.norm(_vee(self.rotation - self.rotation.T)) / 2.0
        return math.atan2(s, c)

    def __eq__(self, other):
        return (isinstance(other, PoseSE3) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"PoseSE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


class Correspondence(NamedTuple):
    world_point: np.ndarray
    pixel: np.ndarray


def as_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    """Accepts a list of :class:`Correspondence` or a ``(points, pixels)`` pair."""
    if (isinstance(corrs, tuple) and len(corrs) == 2 and not isinstance(corrs, Correspondence)
            and not isinstance(corrs[0], Correspondence)):
        pts, px = corrs
    else:
        corrs = list(corrs)
        pts = [c.world_point for c in corrs]
        px = [c.pixel for c in corrs]
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    if len(pts) != len(px):
        raise GeometryError("points and pixels differ in length")
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(px))):
        raise GeometryError("correspondences must be finite")
    return pts, px


# ------------------------------------------------------------------ Lie maps

def _hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


def _vee(M) -> np.ndarray:
    return np.stack([M[..., 2, 1], M[..., 0, 2], M[..., 1, 0]], -1)


def _exp_coeffs(theta):
    """a = sin t / t, b = (1 - cos t) / t^2, c = (t - sin t) / t^3 with series near 0."""
    theta = np.asarray(theta, dtype=np.float64)
    t2 = theta * theta
    small = theta < 1e-2
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1 - t2 / 6 * (1 - t2 / 20 * (1 - t2 / 42)), np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24 * (1 - t2 / 30 * (1 - t2 / 56)),
                 2 * np.sin(safe / 2) ** 2 / safe ** 2)
    c = np.where(small, 1 / 6 - t2 / 120 * (1 - t2 / 42 * (1 - t2 / 72)), (safe - np.sin(safe)) / safe ** 3)
    return a, b, c


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    W = _hat(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def se3_exp_rt(xi) -> tuple[np.ndarray, np.ndarray]:
    """Batched exponential returning ``(R, t)`` arrays."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _exp_coeffs(theta)
    W = _hat(w)
    WW = W @ W
    R = np.eye(3) + a[..., None, None] * W + b[..., None, None] * WW
    V = np.eye(3) + b[..., None, None] * W + c[..., None, None] * WW
    return R, (V @ v[..., None])[..., 0]


def se3_exp(xi) -> PoseSE3:
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    R, t = se3_exp_rt(xi)
    return PoseSE3(R, t)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    s_vec = _vee(R - R.T) / 2.0
    s = np.linalg.norm(s_vec)
    c = (np.trace(R) - 1.0) / 2.0
    theta = math.atan2(s, c)
    if theta < 1e-6:
        return s_vec * (1 + theta * theta / 6)
    if math.pi - theta > 1e-3:
        return s_vec * (theta / s)
    # near pi the antisymmetric part vanishes; read the axis off the symmetric part
    aat = ((R + R.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(aat)))
    axis = aat[:, k] / math.sqrt(aat[k, k])
    axis /= np.linalg.norm(axis)
    if axis @ s_vec < 0:
        axis = -axis
    return axis * theta


def se3_log(p: PoseSE3) -> np.ndarray:
    w = so3_log(p.rotation)
    theta = float(np.linalg.norm(w))
    W = _hat(w)
    if theta < 1e-2:
        coef = 1 / 12 + theta ** 2 / 720 + theta ** 4 / 30240
    else:
        half = theta / 2
        coef = (1 - half / math.tan(half)) / theta ** 2
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([w, V_inv @ p.translation])


# ----------------------------------------------------------------- projection

def project(p: PoseSE3, K: CameraIntrinsics, g) -> np.ndarray:
    X = p.apply(np.asarray(g, dtype=np.float64).reshape(3))
    if X[2] <= MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {X[2]:.3g} does not project")
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def back_project(K: CameraIntrinsics, pixels, depth) -> np.ndarray:
    """Camera-frame points for pixels ``(N, 2)`` at metric depths ``(N,)``."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    return np.stack([(px[:, 0] - K.cx) * d / K.fx, (px[:, 1] - K.cy) * d / K.fy, d], axis=1)


def _project_cam(K, X):
    z = X[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    uv = np.stack([K.fx * X[..., 0] / zs + K.cx, K.fy * X[..., 1] / zs + K.cy], axis=-1)
    return uv, front


def residuals(p: PoseSE3, K: CameraIntrinsics, points, pixels) -> np.ndarray:
    """``c_i - h(g_i, p)`` per point; points behind the camera get a fixed 100 px residual."""
    X = p.apply(points)
    uv, front = _project_cam(K, X)
    r = np.asarray(pixels) - uv
    r[~front] = (BEHIND_RESIDUAL, 0.0)
    return r


def residuals_and_jacobian(p: PoseSE3, K: CameraIntrinsics, points, pixels):
    """Residuals ``(N, 2)`` and their derivative w.r.t. a left twist, ``(N, 2, 6)``."""
    X = p.apply(points)
    uv, front = _project_cam(K, X)
    r = np.asarray(pixels) - uv
    J = _residual_jacobian(K, X, front)
    r[~front] = (BEHIND_RESIDUAL, 0.0)
    return r, J


def _residual_jacobian(K, X, front):
    x, y, z = X[..., 0], X[..., 1], np.where(front, X[..., 2], 1.0)
    zero = np.zeros_like(x)
    dh = np.stack([
        np.stack([K.fx / z, zero, -K.fx * x / z ** 2], -1),
        np.stack([zero, K.fy / z, -K.fy * y / z ** 2], -1),
    ], -2)
    # d(exp(delta) X)/d delta at 0 = [-[X]x | I]
    dX = np.concatenate([-_hat(X), np.broadcast_to(np.eye(3), X.shape[:-1] + (3, 3))], axis=-1)
    J = -(dh @ dX)
    J[~front] = 0.0
    return J


def reprojection_error(p: PoseSE3, K: CameraIntrinsics, corrs) -> float:
    """E = sum_i ||c_i - h(g_i, p)||^2."""
    pts, px = as_arrays(corrs)
    if len(pts) == 0:
        raise InsufficientDataError("reprojection error of an empty correspondence set")
    r = residuals(p, K, pts, px)
    return float(np.sum(r * r))


# --------------------------------------------------------------- refinement

class OptimizeResult(NamedTuple):
    pose: PoseSE3
    cost: float
    iterations: int
    stalled: bool
    costs: list  # cost after every accepted step, starting with the initial cost


def left_update(delta, p: PoseSE3) -> PoseSE3:
    return se3_exp(delta) @ p


def optimize_pose(p0: PoseSE3, K: CameraIntrinsics, corrs, max_iterations: int = 20,
                  lambda0: float = 1e-3, lambda_max: float = 1e8, rel_tol: float = 1e-8) -> OptimizeResult:
    """Levenberg-Marquardt on the reprojection error over a 6-dof left twist."""
    pts, px = as_arrays(corrs)
    if len(pts) < 3:
        raise InsufficientDataError("pose optimisation needs at least 3 correspondences")
    pose = p0
    r, J = residuals_and_jacobian(pose, K, pts, px)
    cost = float(np.sum(r * r))
    costs = [cost]
    lam = lambda0
    stalled = False
    it = 0
    while it < max_iterations and cost > 0:
        it += 1
        Jf = J.reshape(-1, 6)
        rf = r.reshape(-1)
        H = Jf.T @ Jf
        g = Jf.T @ rf
        D = np.diag(np.maximum(np.diag(H), 1e-12))
        accepted = solved = False
        while lam <= lambda_max:
            try:
                delta = np.linalg.solve(H + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10
                continue
            solved = True
            cand = left_update(delta, pose)
            r_new, J_new = residuals_and_jacobian(cand, K, pts, px)
            new_cost = float(np.sum(r_new * r_new))
            if new_cost < cost:
                accepted = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not accepted:
            stalled = not solved
            break
        decrease = (cost - new_cost) / cost
        pose, r, J, cost = cand, r_new, J_new, new_cost
        costs.append(cost)
        if decrease < rel_tol:
            break
    if stalled and len(costs) == 1:
        return OptimizeResult(p0, costs[0], it, True, costs)
    return OptimizeResult(pose, cost, it, stalled, costs)


def gauss_newton(p0: PoseSE3, K: CameraIntrinsics, points, pixels, iterations: int = 10) -> PoseSE3:
    """Plain Gauss-Newton with a cost guard; used to polish RANSAC hypotheses."""
    pose = p0
    r, J = residuals_and_jacobian(pose, K, points, pixels)
    cost = float(np.sum(r * r))
    for _ in range(iterations):
        Jf = J.reshape(-1, 6)
        try:
            delta = np.linalg.solve(Jf.T @ Jf, -Jf.T @ r.reshape(-1))
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        cand = left_update(delta, pose)
        r_new, J_new = residuals_and_jacobian(cand, K, points, pixels)
        new_cost = float(np.sum(r_new * r_new))
        if not new_cost < cost:
            break
        pose, r, J, cost = cand, r_new, J_new, new_cost
        if np.linalg.norm(delta) < 1e-12:
            break
    return pose


# ------------------------------------------------------------------- RANSAC

class PnPResult(NamedTuple):
    pose: PoseSE3
    inliers: np.ndarray  # indices into the input correspondences


def _batch_minimal_solve(R0, t0, K, pts, px, iterations=15):
    """Damped Gauss-Newton on many 4-point samples at once.

    ``pts`` is ``(H, 4, 3)``; returns refined ``(R, t)`` of shape ``(H, 3, 3)``, ``(H, 3)``.
    """
    H = pts.shape[0]
    R = np.broadcast_to(R0, (H, 3, 3)).copy()
    t = np.broadcast_to(t0, (H, 3)).copy()
    lam = np.full(H, 1e-3)

    def evaluate(R, t):
        X = np.einsum("hij,hnj->hni", R, pts) + t[:, None, :]
        uv, front = _project_cam(K, X)
        r = px - uv
        r[~front] = (BEHIND_RESIDUAL, 0.0)
        return X, front, r, np.sum(r * r, axis=(1, 2))

    X, front, r, cost = evaluate(R, t)
    for _ in range(iterations):
        J = _residual_jacobian(K, X, front).reshape(H, -1, 6)
        rf = r.reshape(H, -1)
        A = np.einsum("hki,hkj->hij", J, J)
        g = np.einsum("hki,hk->hi", J, rf)
        diag = np.maximum(np.einsum("hii->hi", A), 1e-12)
        A = A + lam[:, None, None] * np.einsum("hi,ij->hij", diag, np.eye(6))
        try:
            delta = np.linalg.solve(A, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = (np.linalg.pinv(A) @ -g[..., None])[..., 0]
        delta = np.where(np.isfinite(delta), delta, 0.0)
        dR, dt = se3_exp_rt(delta)
        R_new = dR @ R
        t_new = np.einsum("hij,hj->hi", dR, t) + dt
        X_new, front_new, r_new, cost_new = evaluate(R_new, t_new)
        better = cost_new < cost
        R = np.where(better[:, None, None], R_new, R)
        t = np.where(better[:, None], t_new, t)
        X = np.where(better[:, None, None], X_new, X)
        front = np.where(better[:, None], front_new, front)
        r = np.where(better[:, None, None], r_new, r)
        cost = np.where(better, cost_new, cost)
        lam = np.where(better, lam / 10, np.minimum(lam * 10, 1e8))
    return R, t


def _inlier_mask(R, t, K, pts, px, inlier_px):
    """``(H, N)`` mask of points reprojecting within ``inlier_px`` for each hypothesis."""
    X = np.einsum("hij,nj->hni", R, pts) + t[:, None, :]
    uv, front = _project_cam(K, X)
    err = np.linalg.norm(uv - px[None], axis=-1)
    return front & (err < inlier_px)


def pnp_ransac(corrs, K: CameraIntrinsics, rng_seed: int = 0, iterations: int = 100,
               inlier_px: float = 3.0, initial: PoseSE3 | None = None) -> PnPResult:
    """Robust camera pose from 3D-2D correspondences.

    Each hypothesis is a 4-point minimal fit (damped Gauss-Newton seeded at
    ``initial``, identity by default). The hypothesis with the most inliers,
    earliest on ties, is polished by Gauss-Newton on its inliers.

    Correspondences are put in a canonical order before sampling, so the
    result does not depend on how the input was shuffled.
    """
    pts, px = as_arrays(corrs)
    n = len(pts)
    if n < 4:
        raise InsufficientDataError(f"PnP needs at least 4 correspondences, got {n}")
    order = np.lexsort(np.concatenate([pts, px], axis=1).T[::-1])
    pts_s, px_s = pts[order], px[order]

    init = initial or PoseSE3.identity()
    rng = np.random.default_rng(rng_seed)
    samples = np.stack([rng.choice(n, 4, replace=False) for _ in range(iterations)])
    R, t = _batch_minimal_solve(init.rotation, init.translation, K, pts_s[samples], px_s[samples])
    ok = np.all(np.isfinite(R), axis=(1, 2)) & np.all(np.isfinite(t), axis=1)
    masks = _inlier_mask(np.where(ok[:, None, None], R, np.eye(3)), np.where(ok[:, None], t, 0.0),
                         K, pts_s, px_s, inlier_px) & ok[:, None]
    counts = masks.sum(axis=1)
    best = int(np.argmax(counts))
    if counts[best] < 4:
        raise PoseEstimationError(f"best hypothesis has only {counts[best]} inliers")

    Rb, tb = R[best], t[best]
    # re-orthonormalise the hypothesis before wrapping it as a pose
    U, _, Vt = np.linalg.svd(Rb)
    pose = PoseSE3(U @ np.diag([1, 1, np.linalg.det(U @ Vt)]) @ Vt, tb)
    inl = masks[best]
    for _ in range(3):
        pose = gauss_newton(pose, K, pts_s[inl], px_s[inl])
        new = _inlier_mask(pose.rotation[None], pose.translation[None], K, pts_s, px_s, inlier_px)[0]
        if np.array_equal(new, inl) or new.sum() < 4:
            break
        inl = new
    return PnPResult(pose, np.sort(order[inl]))


def synthetic_scene(rng, n: int, K: CameraIntrinsics, pose: PoseSE3 | None = None,
                    depth=(1.0, 5.0), size=(640, 480)):
    """Random world points visible from ``pose`` and their exact projections."""
    pose = pose or PoseSE3.identity()
    u = rng.uniform(20, size[0] - 20, n)
    v = rng.uniform(20, size[1] - 20, n)
    d = rng.uniform(*depth, n)
    cam = back_project(K, np.stack([u, v], 1), d)
    world = pose.inverse().apply(cam)
    return world, np.stack([u, v], 1)


def random_pose(rng, max_angle: float = 0.3, max_translation: float = 0.3) -> PoseSE3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    w = axis * rng.uniform(0, max_angle)
    return PoseSE3(so3_exp(w), rng.uniform(-max_translation, max_translation, 3))


def pose_difference(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """Rotation angle (rad) and translation distance between two poses."""
    d = a @ b.inverse()
    return d.rotation_angle(), float(np.linalg.norm(a.translation - b.translation))


def correspondences(points: Sequence, pixels: Sequence) -> list[Correspondence]:
    return [Correspondence(np.asarray(g, float), np.asarray(c, float)) for g, c in zip(points, pixels)]
