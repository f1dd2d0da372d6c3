"""Action-unit target maps from facial landmarks.

Each AU is a set of landmark groups; every group gets a fitted ellipse,
the ellipses are rasterised and merged, and the binary region is softened
with a radius-3 Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .video import LM, FrameStack, gaussian_filter2d

MIN_AXIS = 2.0
SMOOTH_RADIUS = 3
DEFAULT_SCALE = 1.5


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class AUDefinition:
    index: int
    name: str
    groups: tuple[tuple[str, ...], ...]
    scale: float = DEFAULT_SCALE

    @property
    def landmarks(self) -> tuple[str, ...]:
        return tuple(n for g in self.groups for n in g)


def _lr(*names):
    return tuple(tuple(n.replace("{s}", s) for n in names) for s in ("l", "r"))


AU_REGISTRY = (
    AUDefinition(1, "AU1 inner brow raiser", _lr("brow_{s}_inner", "eye_{s}_inner")),
    AUDefinition(2, "AU2 outer brow raiser", _lr("brow_{s}_outer", "eye_{s}_outer")),
    AUDefinition(3, "AU4 brow lowerer", _lr("brow_{s}_inner", "brow_{s}_outer"), 1.2),
    AUDefinition(4, "AU5 upper lid raiser", _lr("eye_{s}_inner", "eye_{s}_outer", "eye_{s}_center"), 1.2),
    AUDefinition(5, "AU7 lid tightener", _lr("eye_{s}_center", "eye_{s}_outer"), 1.0),
    AUDefinition(6, "AU6 cheek raiser", _lr("cheek_{s}", "eye_{s}_outer")),
    AUDefinition(7, "AU9 nose wrinkler", (("nose_bridge", "nose_tip"),)),
    AUDefinition(8, "AU10 upper lip raiser", (("nose_tip", "cheek_l", "cheek_r"),), 0.9),
    AUDefinition(9, "AU11 nasolabial deepener", _lr("nose_tip", "cheek_{s}"), 1.2),
    AUDefinition(10, "AU38 nostril dilator", (("nose_tip", "nose_bridge"),), 0.6),
    AUDefinition(11, "AU13 cheek puffer", _lr("cheek_{s}", "nose_bridge"), 0.8),
    AUDefinition(12, "AU12 lip corner puller", _lr("mouth_{s}", "dimple_{s}")),
    AUDefinition(13, "AU14 dimpler", _lr("dimple_{s}", "mouth_{s}"), 2.2),
    AUDefinition(14, "AU15 lip corner depressor", _lr("mouth_{s}", "chin"), 0.8),
    AUDefinition(15, "AU17 chin raiser", (("chin", "mouth_bottom"),)),
    AUDefinition(16, "AU25 lips part", (("mouth_top", "mouth_bottom", "mouth_l", "mouth_r"),), 1.2),
)

AU_SUBSETS = {
    "eyes": frozenset(range(1, 6)),
    "nose": frozenset(range(7, 12)),
    "lips": frozenset(range(12, 17)),
    "all": frozenset(range(1, 17)),
}


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (x, y)
    axes: tuple[float, float]  # semi-axes (major, minor)
    rotation: float  # radians, major axis angle from +x


def fit_ellipse(points, scale: float = DEFAULT_SCALE) -> Ellipse:
    """Ellipse from the centroid and principal spread of the points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("fit_ellipse needs at least two points")
    c = pts.mean(axis=0)
    cov = (pts - c).T @ (pts - c) / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, 1]
    angle = float(np.arctan2(major[1], major[0]) % np.pi)
    if np.isclose(evals[1], evals[0], rtol=0, atol=1e-12):
        angle = 0.0
    if np.isclose(angle, np.pi):
        angle = 0.0
    a = max(scale * np.sqrt(max(evals[1], 0.0)), MIN_AXIS)
    b = max(scale * np.sqrt(max(evals[0], 0.0)), MIN_AXIS)
    return Ellipse((float(c[0]), float(c[1])), (float(a), float(b)), angle)


def rasterize_region(e: Ellipse, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    dx, dy = xx - e.center[0], yy - e.center[1]
    cs, sn = np.cos(e.rotation), np.sin(e.rotation)
    u = dx * cs + dy * sn
    v = -dx * sn + dy * cs
    return ((u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0).astype(np.float32)


def gaussian_smooth(region: np.ndarray, radius: int = SMOOTH_RADIUS) -> np.ndarray:
    return np.clip(gaussian_filter2d(region, radius), 0.0, 1.0).astype(np.float32)


def au_map(landmarks: np.ndarray, au: AUDefinition, height: int, width: int) -> np.ndarray:
    region = np.zeros((height, width), dtype=np.float32)
    for group in au.groups:
        pts = landmarks[[LM[n] for n in group]]
        region = np.maximum(region, rasterize_region(fit_ellipse(pts, au.scale), height, width))
    return gaussian_smooth(region)


def build_au_stack(stack: FrameStack, subset: str | frozenset = "all", num_aus: int = 16) -> np.ndarray:
    """(T_f, F, H, W) soft maps; AUs outside ``subset`` stay zero."""
    keep = AU_SUBSETS[subset] if isinstance(subset, str) else frozenset(subset)
    t, _, h, w = stack.frames.shape
    lms = np.asarray(stack.landmarks)
    if lms.shape[0] != t:
        raise LandmarkError(f"landmarks cover {lms.shape[0]} frames, clip has {t}")
    out = np.zeros((t, num_aus, h, w), dtype=np.float32)
    for au in AU_REGISTRY[:num_aus]:
        if au.index not in keep:
            continue
        for f in range(t):
            pts = lms[f]
            bad = [n for n in au.landmarks if LM[n] >= len(pts) or not np.all(np.isfinite(pts[LM[n]]))]
            if bad:
                raise LandmarkError(f"AU {au.index} ({au.name}) frame {f}: missing landmark {bad[0]}")
            out[f, au.index - 1] = au_map(pts, au, h, w)
    return out
