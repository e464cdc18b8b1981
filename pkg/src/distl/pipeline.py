"""Image preprocessing, weak augmentation and multi-crop view generation.

Every function here is pure given its inputs and the ``numpy.random.Generator``
passed in; nothing reads global random state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from distl.errors import InvalidConfigError, InvalidInputError

GLOBAL_SCALE = (0.75, 1.0)
LOCAL_SCALE = (0.2, 0.6)


@dataclass(frozen=True)
class PreprocessConfig:
    side: int = 256
    blur: bool = True
    blur_sigma: float = 1.0
    blur_ksize: int = 5


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    flip_enabled: bool = True
    max_rotation_deg: float = 10.0
    max_translation_frac: float = 0.1

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise InvalidConfigError("max_rotation_deg must be >= 0")
        if not 0.0 <= self.max_translation_frac <= 0.5:
            raise InvalidConfigError("max_translation_frac must be in [0, 0.5]")


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle_deg: float
    shift_x: float
    shift_y: float


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    size: int
    scale: float  # area fraction of the source image


@dataclass
class CropSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    global_boxes: list[CropBox] = field(default_factory=list)
    local_boxes: list[CropBox] = field(default_factory=list)

    @property
    def scales(self) -> list[float]:
        return [b.scale for b in self.global_boxes] + [b.scale for b in self.local_boxes]


def _as_float_grid(raw) -> np.ndarray:
    arr = np.asarray(raw)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInputError(f"expected a nonempty 2-D intensity grid, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite intensities")
    return arr


def _minmax(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def equalize_histogram(arr: np.ndarray) -> np.ndarray:
    """Histogram-equalize a float grid over its distinct intensities.

    Each pixel maps to ``(cdf(v) - cdf_min) / (N - cdf_min)`` where ``cdf`` counts
    pixels with intensity <= v. No quantization happens, so the mapping keeps the
    full bit depth and applying it to its own output changes nothing. A constant
    input maps to zeros.
    """
    values, inverse, counts = np.unique(arr, return_inverse=True, return_counts=True)
    cdf = np.cumsum(counts)
    cdf_min, total = cdf[0], arr.size
    if total == cdf_min:
        return np.zeros_like(arr, dtype=np.float64)
    lut = (cdf - cdf_min) / (total - cdf_min)
    return lut[inverse.reshape(arr.shape)]


def resize(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape
    if h == side and w == side:
        return img.copy()
    interp = cv2.INTER_AREA if side < min(h, w) else cv2.INTER_LINEAR
    out = cv2.resize(img.astype(np.float32), (side, side), interpolation=interp)
    return np.clip(out, 0.0, 1.0)


def preprocess_image(raw, side: int = 256, config: PreprocessConfig | None = None) -> np.ndarray:
    """Equalize, blur, min-max normalize and resize a grayscale image of any bit depth.

    ``side`` is ignored when ``config`` is given. Output is float32 in [0, 1].
    """
    cfg = config or PreprocessConfig(side=side)
    if cfg.side < 1:
        raise InvalidInputError("side must be positive")
    arr = _as_float_grid(raw)
    arr = equalize_histogram(arr)
    if cfg.blur:
        arr = cv2.GaussianBlur(
            arr, (cfg.blur_ksize, cfg.blur_ksize), cfg.blur_sigma, borderType=cv2.BORDER_REFLECT
        )
    arr = _minmax(arr)
    return resize(arr, cfg.side).astype(np.float32)


def draw_augment_params(policy: AugmentPolicy, side: int, rng: np.random.Generator) -> AugmentParams:
    # Fixed draw count regardless of which switches are on, so rng streams stay aligned.
    u = rng.random(4)
    flip = bool(policy.flip_enabled and u[0] < 0.5)
    angle = (2.0 * u[1] - 1.0) * policy.max_rotation_deg
    max_shift = policy.max_translation_frac * side
    return AugmentParams(
        flip=flip,
        angle_deg=float(angle),
        shift_x=float((2.0 * u[2] - 1.0) * max_shift),
        shift_y=float((2.0 * u[3] - 1.0) * max_shift),
    )


def apply_augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = img[:, ::-1] if params.flip else img
    h, w = out.shape
    mat = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), params.angle_deg, 1.0)
    mat[0, 2] += params.shift_x
    mat[1, 2] += params.shift_y
    out = cv2.warpAffine(
        np.ascontiguousarray(out, dtype=np.float32),
        mat,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0.0,
    )
    return np.clip(out, 0.0, 1.0)


def weak_augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random flip, rotation and translation; out-of-frame pixels are zero."""
    if not policy.enabled:
        return img
    params = draw_augment_params(policy, img.shape[0], rng)
    return apply_augment(img, params)


def _side_bounds(src: int, scale_range: tuple[float, float]) -> tuple[int, int]:
    lo = math.ceil(math.sqrt(scale_range[0]) * src - 1e-9)
    hi = math.floor(math.sqrt(scale_range[1]) * src + 1e-9)
    lo = max(lo, 1)
    if hi < lo:
        raise InvalidInputError(
            f"image side {src} too small to realize crop scales {scale_range}"
        )
    return lo, hi


def draw_crop(src: int, scale_range: tuple[float, float], rng: np.random.Generator) -> CropBox:
    """Square crop whose area fraction is uniform in ``scale_range``.

    The side is rounded to whole pixels and clamped so that the realized area
    fraction stays inside the range.
    """
    lo, hi = _side_bounds(src, scale_range)
    u = rng.random(3)
    area = scale_range[0] + u[0] * (scale_range[1] - scale_range[0])
    size = int(min(max(round(math.sqrt(area) * src), lo), hi))
    top = int(u[1] * (src - size + 1))
    left = int(u[2] * (src - size + 1))
    return CropBox(top=top, left=left, size=size, scale=size * size / float(src * src))


def multi_crop(
    img: np.ndarray,
    g: int = 2,
    l: int = 4,  # noqa: E741
    rng: np.random.Generator | None = None,
    global_side: int | None = None,
    local_side: int | None = None,
    global_scale: tuple[float, float] = GLOBAL_SCALE,
    local_scale: tuple[float, float] = LOCAL_SCALE,
) -> CropSet:
    """Cut ``g`` global and ``l`` local square views out of ``img``.

    Globals are resized to ``global_side`` (default: the image side), locals to
    ``local_side`` (default: half of it).
    """
    if g < 1 or l < 0:
        raise InvalidInputError(f"need g >= 1 and l >= 0, got g={g}, l={l}")
    if rng is None:
        raise InvalidInputError("multi_crop needs an explicit rng")
    src = img.shape[0]
    if img.shape[1] != src:
        raise InvalidInputError("multi_crop expects a square image")
    global_side = global_side or src
    local_side = local_side or max(src // 2, 1)

    crops = CropSet(globals=[], locals=[])
    for _ in range(g):
        box = draw_crop(src, global_scale, rng)
        crops.global_boxes.append(box)
        crops.globals.append(_cut(img, box, global_side))
    for _ in range(l):
        box = draw_crop(src, local_scale, rng)
        crops.local_boxes.append(box)
        crops.locals.append(_cut(img, box, local_side))
    return crops


def _cut(img: np.ndarray, box: CropBox, out_side: int) -> np.ndarray:
    patch = img[box.top:box.top + box.size, box.left:box.left + box.size]
    return resize(patch, out_side).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale raster without changing its bit depth."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InvalidInputError(f"cannot read image {path}")
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    return img
