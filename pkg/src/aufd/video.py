"""Synthetic face clips, frame sampling, perturbations and the ``.clip`` file format.

Faces are drawn procedurally from layered ellipses and strokes, so every
landmark is known exactly. Fake clips carry one local edit (brow raise,
eye-size change or mouth-corner shift) pasted into the real clip inside
the edited feature's bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .config import ConfigError
from .formats import FormatError, pack_container, read_f32, unpack_container

LANDMARKS = (
    "brow_l_inner", "brow_l_outer", "brow_r_inner", "brow_r_outer",
    "eye_l_center", "eye_l_inner", "eye_l_outer",
    "eye_r_center", "eye_r_inner", "eye_r_outer",
    "nose_bridge", "nose_tip",
    "mouth_l", "mouth_r", "mouth_top", "mouth_bottom",
    "cheek_l", "cheek_r", "chin", "dimple_l", "dimple_r",
)
LM = {name: i for i, name in enumerate(LANDMARKS)}

EDITS = ("brow_raise", "eye_size", "mouth_corner_shift")
MAX_EDIT_MAGNITUDE = 1.0
MAX_REGION_FRACTION = 0.15

REAL, FAKE = 0, 1


class InsufficientFramesError(ValueError):
    pass


class PerturbationError(ValueError):
    pass


@dataclass
class FrameStack:
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    landmarks: np.ndarray  # (T, len(LANDMARKS), 2) float32, (x, y) pixels

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class LabeledClip:
    stack: FrameStack
    label: int
    edit: tuple[str, float] | None = None
    seed: int = -1
    region: tuple[int, int, int, int] | None = field(default=None, compare=False)  # y0, y1, x0, x1

    def __post_init__(self):
        if self.label == FAKE and self.edit is None:
            raise ValueError("fake clips need an edit descriptor")


@dataclass(frozen=True)
class ClipGeometry:
    frames: int = 8
    height: int = 64
    width: int = 64
    raw_frames: int = 16
    blend_offset: float = 0.0
    flicker: float = 0.05
    grain: float = 0.02

    @classmethod
    def from_config(cls, cfg, **kw) -> ClipGeometry:
        return cls(cfg.frames, cfg.height, cfg.width, cfg.raw_frames, **kw)


def sample_indices(n_raw: int, count: int) -> np.ndarray:
    if count < 1 or n_raw < count:
        raise InsufficientFramesError(f"need at least {count} frames, got {n_raw}")
    return (np.arange(count) * n_raw) // count


def sample_frames(raw: FrameStack, count: int) -> FrameStack:
    idx = sample_indices(raw.frames.shape[0], count)
    return FrameStack(raw.frames[idx].copy(), raw.landmarks[idx].copy())


def detect_face(stack: FrameStack) -> FrameStack:
    """Face crop stub: synthetic faces are already centred, so this is identity.

    A real detector would return a cropped, resized stack with landmarks
    mapped into crop coordinates.
    """
    return stack


# -- rendering ----------------------------------------------------------------


def _ellipse_alpha(xx, yy, cx, cy, ax, ay, soft=0.75):
    r = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    sd = (r - 1.0) * min(ax, ay)
    return np.clip(0.5 - sd / soft, 0.0, 1.0)


def _segment_alpha(xx, yy, p0, p1, width, soft=0.75):
    p0 = np.asarray(p0, float)
    d = np.asarray(p1, float) - p0
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(d @ d, 1e-9), 0.0, 1.0)
    dist = np.hypot(xx - p0[0] - t * d[0], yy - p0[1] - t * d[1])
    return np.clip(0.5 - (dist - 0.5 * width) / soft, 0.0, 1.0)


def _blend(img, alpha, color):
    img *= 1.0 - alpha[None]
    img += alpha[None] * np.asarray(color, float)[:, None, None]


@dataclass
class _Face:
    k: float
    bg: np.ndarray
    bg_grad: float
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lip: np.ndarray
    cx: float
    cy: float
    fa: float
    fb: float
    eye_dx: float
    eye_dy: float
    eye_ax: float
    eye_ay: float
    brow_gap: float
    brow_len: float
    brow_w: float
    nose_len: float
    mouth_dy: float
    mouth_hw: float
    lip_w: float
    bob_amp: float
    bob_period: float
    bob_phase: float
    sway_amp: float
    blink_start: int
    brow_amp: float
    brow_phase: float


def _draw_face(rng: np.random.Generator, k: float) -> _Face:
    u = rng.uniform
    tone = u(0.6, 0.7)
    return _Face(
        k=k,
        bg=u(0.45, 0.55, 3),
        bg_grad=u(-0.1, 0.1),
        skin=np.clip(tone * np.array([1.0, 0.8, 0.68]) + u(-0.03, 0.03, 3), 0, 1),
        hair=u(0.03, 0.3) * np.array([1.0, 0.85, 0.7]),
        iris=u(0.05, 0.4) * np.array([0.6, 0.8, 1.0]),
        lip=np.array([u(0.55, 0.8), u(0.2, 0.35), u(0.25, 0.4)]),
        cx=u(-1.5, 1.5) * k,
        cy=u(-1.5, 1.5) * k,
        fa=19.0 * k * u(0.95, 1.05),
        fb=24.0 * k * u(0.95, 1.05),
        eye_dx=u(7.5, 8.5) * k,
        eye_dy=u(4.0, 5.0) * k,
        eye_ax=u(3.6, 4.2) * k,
        eye_ay=u(2.0, 2.4) * k,
        brow_gap=u(4.6, 5.4) * k,
        brow_len=u(7.0, 8.5) * k,
        brow_w=u(1.4, 1.8) * k,
        nose_len=u(6.5, 7.5) * k,
        mouth_dy=u(9.5, 11.0) * k,
        mouth_hw=u(5.0, 6.0) * k,
        lip_w=u(1.6, 2.0) * k,
        bob_amp=u(0.3, 1.0) * k,
        bob_period=u(6.0, 12.0),
        bob_phase=u(0, 2 * np.pi),
        sway_amp=u(0.0, 0.6) * k,
        blink_start=int(rng.integers(0, 1 << 30)),
        brow_amp=u(0.0, 0.5) * k,
        brow_phase=u(0, 2 * np.pi),
    )


def _pose(face: _Face, t: int, n_raw: int, edit):
    """Per-frame feature geometry: landmark dict plus eye openness and sizes."""
    name, m = edit if edit else ("", 0.0)
    k = face.k
    cx = 32.0 * k + face.cx + face.sway_amp * np.sin(2 * np.pi * t / (1.7 * face.bob_period))
    cy = 33.0 * k + face.cy + face.bob_amp * np.sin(2 * np.pi * t / face.bob_period + face.bob_phase)
    blink_t = (t - face.blink_start) % n_raw
    openness = {0: 0.5, 1: 0.15, 2: 0.5}.get(blink_t, 1.0)
    brow_lift = face.brow_amp * (0.5 + 0.5 * np.sin(2 * np.pi * t / n_raw + face.brow_phase))
    if name == "brow_raise":
        brow_lift += 5.0 * k * m
    eye_scale = 1.0 + 0.45 * m if name == "eye_size" else 1.0
    ex, ey = face.eye_ax * eye_scale, face.eye_ay * eye_scale

    eye_y = cy - face.eye_dy
    pts = {}
    for side, sgn in (("l", -1.0), ("r", 1.0)):
        ecx = cx + sgn * face.eye_dx
        pts[f"eye_{side}_center"] = (ecx, eye_y)
        pts[f"eye_{side}_inner"] = (ecx - sgn * ex, eye_y)
        pts[f"eye_{side}_outer"] = (ecx + sgn * ex, eye_y)
        by = eye_y - face.eye_ay - face.brow_gap - brow_lift
        pts[f"brow_{side}_inner"] = (ecx - sgn * 0.45 * face.brow_len, by + 0.4 * k)
        pts[f"brow_{side}_outer"] = (ecx + sgn * 0.55 * face.brow_len, by + 0.8 * k)
        pts[f"cheek_{side}"] = (ecx + sgn * 1.5 * k, cy + 4.0 * k)
    pts["nose_bridge"] = (cx, eye_y)
    pts["nose_tip"] = (cx, eye_y + face.nose_len)
    my = cy + face.mouth_dy
    ml = [cx - face.mouth_hw, my]
    mr = [cx + face.mouth_hw, my]
    if name == "mouth_corner_shift":
        mr = [mr[0] + 1.5 * k * m, my - 4.0 * k * m]
    pts["mouth_l"] = tuple(ml)
    pts["mouth_r"] = tuple(mr)
    pts["mouth_top"] = (cx, my - face.lip_w)
    pts["mouth_bottom"] = (cx, my + face.lip_w)
    pts["chin"] = (cx, cy + face.fb * 0.85)
    pts["dimple_l"] = (ml[0] - 2.0 * k, ml[1] - 0.5 * k)
    pts["dimple_r"] = (mr[0] + 2.0 * k, mr[1] - 0.5 * k)
    return pts, openness, ex, ey


def _render(face: _Face, pts, openness, ex, ey, xx, yy, h, w) -> np.ndarray:
    k = face.k
    img = np.empty((3, h, w))
    ramp = face.bg_grad * (yy / h - 0.5)
    img[:] = np.clip(face.bg[:, None, None] + ramp[None], 0, 1)
    fcx = pts["nose_bridge"][0]
    fcy = pts["nose_bridge"][1] + face.eye_dy
    _blend(img, _ellipse_alpha(xx, yy, fcx, fcy, face.fa, face.fb), face.skin)
    shade = np.clip(((yy - fcy) / face.fb), 0, 1) * 0.08
    img -= (shade * _ellipse_alpha(xx, yy, fcx, fcy, face.fa, face.fb))[None]
    blush = face.skin * np.array([1.05, 0.9, 0.9])
    for side in ("l", "r"):
        c = pts[f"cheek_{side}"]
        _blend(img, 0.35 * _ellipse_alpha(xx, yy, c[0], c[1], 3.0 * k, 2.2 * k, soft=2.0), blush)
        d = pts[f"dimple_{side}"]
        _blend(img, 0.25 * _ellipse_alpha(xx, yy, d[0], d[1], 0.8 * k, 0.8 * k), face.skin * 0.7)
    _blend(img, 0.6 * _segment_alpha(xx, yy, pts["nose_bridge"], pts["nose_tip"], 1.2 * k), face.skin * 0.75)
    tip = pts["nose_tip"]
    for sgn in (-1, 1):
        _blend(img, 0.7 * _ellipse_alpha(xx, yy, tip[0] + sgn * 1.6 * k, tip[1], 0.9 * k, 0.6 * k), face.skin * 0.45)
    mid = ((pts["mouth_l"][0] + pts["mouth_r"][0]) / 2, (pts["mouth_top"][1] + pts["mouth_bottom"][1]) / 2)
    for corner in (pts["mouth_l"], pts["mouth_r"]):
        _blend(img, _segment_alpha(xx, yy, corner, mid, 2.0 * face.lip_w * 0.8), face.lip)
    for side in ("l", "r"):
        c = pts[f"eye_{side}_center"]
        a_white = _ellipse_alpha(xx, yy, c[0], c[1], ex, max(ey * openness, 0.3))
        _blend(img, a_white, np.array([0.95, 0.95, 0.92]))
        a_iris = _ellipse_alpha(xx, yy, c[0], c[1], 0.45 * ey + 0.6 * k, 0.45 * ey + 0.6 * k) * a_white
        _blend(img, a_iris, face.iris)
        _blend(img, _segment_alpha(xx, yy, pts[f"brow_{side}_inner"], pts[f"brow_{side}_outer"], face.brow_w), face.hair)
    return np.clip(img, 0.0, 1.0)


def _feature_box(name, pts, ex, ey, k) -> tuple[float, float, float, float]:
    """Bounding box (x0, y0, x1, y1) of everything an edit of ``name`` can touch."""
    if name == "brow_raise":
        keys = ["brow_l_inner", "brow_l_outer", "brow_r_inner", "brow_r_outer"]
        pad = 2.0 * k
    elif name == "eye_size":
        keys = ["eye_l_center", "eye_r_center"]
        pad = 0.0
    else:
        keys = ["mouth_r", "mouth_top", "mouth_bottom", "dimple_r"]
        pad = 2.5 * k
    p = np.array([pts[q] for q in keys])
    if name == "eye_size":
        return (p[:, 0].min() - ex - 1.5, p[:, 1].min() - ey - 1.5, p[:, 0].max() + ex + 1.5, p[:, 1].max() + ey + 1.5)
    return (p[:, 0].min() - pad, p[:, 1].min() - pad, p[:, 0].max() + pad, p[:, 1].max() + pad)


def generate_synthetic_clip(seed: int, geometry: ClipGeometry = ClipGeometry(), edit=None) -> LabeledClip:
    """Render a clip; ``edit`` is ``None`` (real) or ``(name, magnitude)`` (fake)."""
    if edit is not None:
        name, mag = edit
        if name not in EDITS:
            raise ConfigError(f"unknown edit {name!r}; expected one of {', '.join(EDITS)}")
        if not 0.0 <= mag <= MAX_EDIT_MAGNITUDE:
            raise ConfigError(f"edit magnitude {mag} outside [0, {MAX_EDIT_MAGNITUDE}]")
        edit = (name, float(mag))
    h, w, n_raw = geometry.height, geometry.width, geometry.raw_frames
    k = min(h, w) / 64.0
    rng = np.random.default_rng(seed)
    face = _draw_face(rng, k)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5

    idx = sample_indices(n_raw, geometry.frames)
    real_poses = [_pose(face, int(t), n_raw, None) for t in idx]
    frames = np.stack([_render(face, *p, xx, yy, h, w) for p in real_poses])
    # camera frames carry per-frame sensor grain; pasted generator output does not
    frames += geometry.grain * np.random.default_rng([seed, 1]).standard_normal(frames.shape)
    landmarks = np.array([[p[0][n] for n in LANDMARKS] for p in real_poses])
    region = None
    if edit is not None:
        fake_poses = [_pose(face, int(t), n_raw, edit) for t in idx]
        boxes = np.array(
            [_feature_box(edit[0], p[0], p[2], p[3], k) for p in real_poses + fake_poses]
        )
        x0 = int(np.clip(np.floor(boxes[:, 0].min()), 0, w))
        y0 = int(np.clip(np.floor(boxes[:, 1].min()), 0, h))
        x1 = int(np.clip(np.ceil(boxes[:, 2].max()), 0, w))
        y1 = int(np.clip(np.ceil(boxes[:, 3].max()), 0, h))
        if (x1 - x0) * (y1 - y0) > MAX_REGION_FRACTION * h * w:
            raise ConfigError(f"edit region {(x1 - x0)}x{(y1 - y0)} exceeds {MAX_REGION_FRACTION:.0%} of the frame")
        edited = np.stack([_render(face, *p, xx, yy, h, w) for p in fake_poses])
        # per-frame pasting leaves a frame-to-frame brightness flicker inside the region
        sign = np.where(np.arange(len(idx)) % 2 == 0, 1.0, -1.0)[:, None, None, None]
        patch = edited[:, :, y0:y1, x0:x1] + geometry.blend_offset + geometry.flicker * sign
        frames[:, :, y0:y1, x0:x1] = np.clip(patch, 0.0, 1.0)
        landmarks = np.array([[p[0][n] for n in LANDMARKS] for p in fake_poses])
        region = (y0, y1, x0, x1)
    landmarks = np.clip(landmarks, 0.0, [w - 1e-3, h - 1e-3])
    frames = np.clip(frames, 0.0, 1.0)
    stack = FrameStack(frames.astype(np.float32), landmarks.astype(np.float32))
    return LabeledClip(stack, FAKE if edit else REAL, edit, seed, region)


def make_corpus(
    n: int,
    seed: int,
    geometry: ClipGeometry = ClipGeometry(),
    fake_fraction: float = 0.5,
    magnitude: tuple[float, float] = (0.6, 1.0),
) -> list[LabeledClip]:
    """Balanced corpus: clip ``i`` uses seed ``seed * 100003 + i``; fakes cycle the edit types."""
    rng = np.random.default_rng(seed)
    n_fake = int(round(n * fake_fraction))
    labels = np.array([FAKE] * n_fake + [REAL] * (n - n_fake))
    rng.shuffle(labels)
    clips = []
    n_seen = 0
    for i, lab in enumerate(labels):
        edit = None
        mag = rng.uniform(*magnitude)
        if lab == FAKE:
            edit = (EDITS[n_seen % len(EDITS)], float(mag))
            n_seen += 1
        clips.append(generate_synthetic_clip(seed * 100003 + i, geometry, edit))
    return clips


# -- perturbations -------------------------------------------------------------

FAMILY_RANGES = {
    "saturation": (0.5, 2.0),
    "contrast": (0.5, 2.0),
    "gaussian_noise": (0.01, 0.1),
    "gaussian_blur": (3.0, 11.0),
    "pixelation": (4.0, 16.0),
    "blocking": (10.0, 50.0),
}
IDENTITY_PARAMS = {"saturation": 1.0, "contrast": 1.0}
EXTREME_PARAMS = {
    "saturation": (0.5, 2.0),
    "contrast": (0.5, 2.0),
    "gaussian_noise": (0.1,),
    "gaussian_blur": (11.0,),
    "pixelation": (16.0,),
    "blocking": (10.0,),
}
LUMA = np.array([0.299, 0.587, 0.114])
# Uniform quantizer step in 0..255 units per quality point below 100.  At
# quality 50 the step equals the mean entry (57.625) of the baseline JPEG
# luminance table, so q=50 is about as coarse as a standard quality-50 encode.
BLOCKING_STEP_PER_QUALITY = 57.625 / 50.0


@dataclass(frozen=True)
class PerturbationSpec:
    family: str
    parameter: float
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILY_RANGES:
            raise PerturbationError(f"unknown perturbation family {self.family!r}")
        lo, hi = FAMILY_RANGES[self.family]
        if not lo <= self.parameter <= hi:
            raise PerturbationError(f"{self.family} parameter {self.parameter} outside [{lo}, {hi}]")

    @property
    def label(self) -> str:
        return f"{self.family}={self.parameter:g}"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> PerturbationSpec:
        family, _, value = text.partition("=")
        try:
            return cls(family.strip(), float(value), seed)
        except ValueError as exc:
            raise PerturbationError(f"bad perturbation {text!r}: {exc}") from None


def gaussian_kernel(radius: int) -> np.ndarray:
    sigma = radius / 3.0
    x = np.arange(-radius, radius + 1, dtype=float)
    kern = np.exp(-0.5 * (x / sigma) ** 2)
    return kern / kern.sum()


def gaussian_filter2d(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable Gaussian over the last two axes with reflective borders."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    kern = gaussian_kernel(radius)
    out = np.asarray(img, dtype=float)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect" if out.shape[axis] > radius else "symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for j, wgt in enumerate(kern):
            acc += wgt * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def _saturation(x, f):
    y = np.tensordot(LUMA, x, axes=([0], [1]))[:, None]
    return y + f * (x - y)


def _contrast(x, f):
    m = x.mean(axis=(2, 3), keepdims=True)
    return m + f * (x - m)


def _pixelate(x, factor):
    t, c, h, w = x.shape
    out = np.empty_like(x)
    for y0 in range(0, h, factor):
        for x0 in range(0, w, factor):
            blk = x[:, :, y0:y0 + factor, x0:x0 + factor]
            out[:, :, y0:y0 + factor, x0:x0 + factor] = blk.mean(axis=(2, 3), keepdims=True)
    return out


def _blocking(x, quality):
    t, c, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = xp.shape[2:]
    blocks = xp.reshape(t, c, H // 8, 8, W // 8, 8)
    coef = dctn(blocks * 255.0 - 128.0, axes=(3, 5), norm="ortho")
    step = (100.0 - quality) * BLOCKING_STEP_PER_QUALITY
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(3, 5), norm="ortho").reshape(t, c, H, W)
    return (rec[:, :, :h, :w] + 128.0) / 255.0


def apply_perturbation(stack: FrameStack, spec: PerturbationSpec) -> FrameStack:
    x = stack.frames.astype(np.float64)
    fam, p = spec.family, spec.parameter
    if fam == "saturation":
        out = _saturation(x, p)
    elif fam == "contrast":
        out = _contrast(x, p)
    elif fam == "gaussian_noise":
        out = x + np.random.default_rng(spec.seed).normal(0.0, p, size=x.shape)
    elif fam == "gaussian_blur":
        out = gaussian_filter2d(x, int(round(p)))
    elif fam == "pixelation":
        out = _pixelate(x, int(round(p)))
    else:
        out = _blocking(x, p)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return FrameStack(out, stack.landmarks.copy())


def perturb_clip(clip: LabeledClip, spec: PerturbationSpec) -> LabeledClip:
    return LabeledClip(apply_perturbation(clip.stack, spec), clip.label, clip.edit, clip.seed, clip.region)


# -- .clip files ---------------------------------------------------------------

def write_clip(clip: LabeledClip, path) -> None:
    t, c, h, w = clip.stack.frames.shape
    header = {
        "kind": "clip",
        "dims": f"{t},{c},{h},{w}",
        "label": "fake" if clip.label == FAKE else "real",
        "edit": f"{clip.edit[0]}:{clip.edit[1]!r}" if clip.edit else "none",
        "seed": clip.seed,
        "region": ",".join(map(str, clip.region)) if clip.region else "none",
        "landmarks": ",".join(LANDMARKS),
    }
    payload = (
        np.ascontiguousarray(clip.stack.frames, dtype="<f4").tobytes()
        + np.ascontiguousarray(clip.stack.landmarks, dtype="<f4").tobytes()
    )
    Path(path).write_bytes(pack_container(header, payload))


def read_clip(path) -> LabeledClip:
    header, payload, base = unpack_container(Path(path).read_bytes())
    if header.get("kind") != "clip":
        raise FormatError(f"expected kind=clip, got {header.get('kind')!r}")
    try:
        t, c, h, w = (int(v) for v in header["dims"].split(","))
        names = header["landmarks"].split(",")
        label = {"real": REAL, "fake": FAKE}[header["label"]]
        seed = int(header["seed"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad clip header: {exc}") from None
    n_pix = t * c * h * w
    frames = read_f32(payload, 0, n_pix, base).reshape(t, c, h, w).astype(np.float32)
    lms = read_f32(payload, 4 * n_pix, t * len(names) * 2, base).reshape(t, len(names), 2).astype(np.float32)
    edit = None
    if header.get("edit", "none") != "none":
        name, _, mag = header["edit"].partition(":")
        edit = (name, float(mag))
    region = None
    if header.get("region", "none") != "none":
        region = tuple(int(v) for v in header["region"].split(","))
    return LabeledClip(FrameStack(frames, lms), label, edit, seed, region)


def write_corpus(clips, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, clip in enumerate(clips):
        p = directory / f"clip_{i:05d}.clip"
        write_clip(clip, p)
        paths.append(p)
    return paths


def read_corpus(directory) -> list[LabeledClip]:
    return [read_clip(p) for p in sorted(Path(directory).glob("*.clip"))]
