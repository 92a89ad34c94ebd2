"""Trajectory accuracy: timestamp association, rigid alignment, ATE and plots."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .geometry import InsufficientDataError, PoseSE3
from .trajectory import Trajectory
from .tum import ASSOCIATION_WINDOW, associate


def matched_positions(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW):
    pairs = associate(est.times(), gt.times(), window)
    if not pairs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    i, j = np.array(pairs).T
    return est.positions()[i], gt.positions()[j]


def umeyama(src: np.ndarray, dst: np.ndarray) -> PoseSE3:
    """Rigid (R, t) minimising sum |dst - (R src + t)|^2; no scale."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or src.shape != dst.shape:
        raise InsufficientDataError(f"rigid alignment needs at least 3 point pairs, got {len(src)}")
    if np.array_equal(src, dst):
        # exact optimum; the SVD route would leave ~1e-16 of rounding behind
        return PoseSE3.identity()
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    # reflection guard; also makes collinear and planar sets come out proper
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return PoseSE3(R, mu_d - R @ mu_s)


def align_umeyama(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> PoseSE3:
    e, g = matched_positions(est, gt, window)
    return umeyama(e, g)


def ate_residuals(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> np.ndarray:
    e, g = matched_positions(est, gt, window)
    S = umeyama(e, g)
    return np.linalg.norm(g - S.apply(e), axis=1)


def ate_rmse(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> float:
    r = ate_residuals(est, gt, window)
    return float(np.sqrt(np.mean(r * r)))


def transform_trajectory(traj: Trajectory, S: PoseSE3) -> Trajectory:
    return Trajectory(list(traj.timestamps), [S @ p for p in traj.poses])


# ------------------------------------------------------------------ plotting

def _nice_step(span: float, target: int = 6) -> float:
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def plot_trajectory(est: Trajectory, gt: Trajectory, path, title: str = "", align: bool = True,
                    width: int = 640, height: int = 480) -> None:
    """Standalone SVG of the XY paths, one polyline per non-empty trajectory."""
    if align:
        try:
            est = transform_trajectory(est, align_umeyama(est, gt))
        except InsufficientDataError:
            pass
    series = [(n, t.positions()[:, :2], c) for n, t, c in
              (("ground truth", gt, "#222222"), ("estimate", est, "#d62728"))]
    pts = np.concatenate([p for _, p, _ in series]) if any(len(p) for _, p, _ in series) else np.zeros((0, 2))
    if len(pts):
        lo, hi = pts.min(0), pts.max(0)
    else:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    span = max(float((hi - lo).max()), 1e-3)
    mid = (lo + hi) / 2
    lo, hi = mid - 0.55 * span, mid + 0.55 * span
    margin = 60
    scale = min((width - 2 * margin) / (hi[0] - lo[0]), (height - 2 * margin) / (hi[1] - lo[1]))

    def to_px(xy):
        return margin + (xy[0] - lo[0]) * scale, height - margin - (xy[1] - lo[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    x0, y0 = to_px(lo)
    x1, y1 = to_px(hi)
    out.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y0:.2f}" stroke="black"/>')
    out.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x0:.2f}" y2="{y1:.2f}" stroke="black"/>')
    step = _nice_step(hi[0] - lo[0])
    for v in np.arange(math.ceil(lo[0] / step) * step, hi[0] + 1e-12, step):
        px, _ = to_px((v, lo[1]))
        out.append(f'<line x1="{px:.2f}" y1="{y0:.2f}" x2="{px:.2f}" y2="{y0 + 5:.2f}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{y0 + 18:.2f}" text-anchor="middle">{v:.3g}</text>')
    for v in np.arange(math.ceil(lo[1] / step) * step, hi[1] + 1e-12, step):
        _, py = to_px((lo[0], v))
        out.append(f'<line x1="{x0 - 5:.2f}" y1="{py:.2f}" x2="{x0:.2f}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8:.2f}" y="{py + 4:.2f}" text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{height - 15}" text-anchor="middle">x [m]</text>')
    out.append(f'<text x="15" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {(y0 + y1) / 2:.2f})">y [m]</text>')
    for name, p, colour in series:
        if len(p):
            coords = " ".join("%.2f,%.2f" % to_px(q) for q in p)
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}">'
                       f'<title>{escape(name)}</title></polyline>')
    lx, ly = width - margin - 110, margin - 20
    out.append(f'<g class="legend"><rect x="{lx - 8}" y="{ly - 12}" width="125" height="42" '
               f'fill="white" stroke="#999999"/>')
    for k, (name, _, colour) in enumerate(series):
        yy = ly + 16 * k
        out.append(f'<line x1="{lx}" y1="{yy}" x2="{lx + 20}" y2="{yy}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{yy + 4}">{escape(name)}</text>')
    out.append("</g></svg>")
    try:
        Path(path).write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc}") from exc
