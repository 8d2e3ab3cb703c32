"""Deterministic single-image augmentations.

Seven canonical operations transform an RGB image into its contrastive
counterpart: color inversion, 180-degree flip, random crop-and-zoom,
random erase, unsharp masking, Sobel edge extraction, and forward
diffusion noise.  Every operation is a pure function of
(kind, params, seed, image bytes).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import rng

CHANNELS = 3

KINDS = ("color", "edge", "sharp", "crop", "erase", "flip", "noise")
IDENTITY_KIND = "identity"  # no-op, for baselines and tests; not in KINDS

# Rec. 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


class ImageTooSmallError(ValueError):
    """Raised when region sampling would degenerate (image < 8x8)."""


@dataclass(frozen=True)
class ImageBuffer:
    """An 8-bit RGB pixel grid, stored row-major as (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != CHANNELS:
            raise ValueError(f"expected (H, W, 3) array, got shape {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if p.dtype != np.uint8:
            raise ValueError(f"expected uint8 samples, got {p.dtype}")
        if not p.flags.writeable:
            return
        p.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(np.ascontiguousarray(arr, dtype=np.uint8))

    @classmethod
    def from_png(cls, data: bytes) -> "ImageBuffer":
        img = Image.open(io.BytesIO(data))
        return cls.from_array(np.asarray(img.convert("RGB")))

    @classmethod
    def load_png(cls, path) -> "ImageBuffer":
        with open(path, "rb") as fh:
            return cls.from_png(fh.read())

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save_png(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_png())


@dataclass(frozen=True)
class AugmentationOp:
    """One augmentation: a kind, its numeric parameters, and an RNG seed.

    The seed is consumed by crop, erase and noise; the other kinds are
    parameter-only.  Default parameters:

    * crop: side fractions uniform in [crop_min, crop_max] = [0.4, 0.8]
      of each dimension, uniform position, bilinear resample back.
    * erase: area fraction uniform in [0.2, 0.5], aspect (w/h) uniform
      in [0.5, 2.0], filled with mid-gray (128, 128, 128).
    * sharp: out = img + strength * (img - gaussian_blur(img, sigma)),
      strength 3.0, sigma 2.0.
    * noise: forward diffusion with a linear beta schedule from 1e-4 to
      0.02 over 1000 steps, applied at step t=500, pixels mapped to
      [-1, 1] before noising and clamped back to [0, 255].
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS and self.kind != IDENTITY_KIND:
            raise ValueError(f"unknown augmentation kind: {self.kind!r}")

    def with_seed(self, seed: int) -> "AugmentationOp":
        return AugmentationOp(self.kind, dict(self.params), seed)


DEFAULT_PARAMS = {
    "color": {},
    "edge": {},
    "sharp": {"strength": 3.0, "sigma": 2.0},
    "crop": {"min_frac": 0.4, "max_frac": 0.8},
    "erase": {"min_area": 0.2, "max_area": 0.5, "min_aspect": 0.5, "max_aspect": 2.0},
    "flip": {},
    "noise": {"t": 500, "steps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
}


def make_op(kind: str, seed: int = 0, **overrides) -> AugmentationOp:
    params = dict(DEFAULT_PARAMS.get(kind, {}))
    params.update(overrides)
    return AugmentationOp(kind, params, seed)


def identity_op() -> AugmentationOp:
    """A no-op augmentation; apply() returns the input unchanged."""
    return AugmentationOp(IDENTITY_KIND)


def augmentation_set() -> list[AugmentationOp]:
    """The seven canonical operations in their fixed tie-break order."""
    return [make_op(k) for k in KINDS]


def _color(px: np.ndarray) -> np.ndarray:
    return 255 - px


def _flip(px: np.ndarray) -> np.ndarray:
    # horizontal then vertical flip == 180-degree rotation
    return px[::-1, ::-1, :]


def _crop(px: np.ndarray, params: dict, seed: int) -> np.ndarray:
    h, w = px.shape[:2]
    lo, hi = params["min_frac"], params["max_frac"]
    # draw order: width fraction, height fraction, x offset, y offset
    u = rng.uniforms(rng.mix(seed, "crop"), 4)
    cw = max(1, int(round((lo + (hi - lo) * u[0]) * w)))
    ch = max(1, int(round((lo + (hi - lo) * u[1]) * h)))
    x0 = int(u[2] * (w - cw + 1))
    y0 = int(u[3] * (h - ch + 1))
    region = px[y0 : y0 + ch, x0 : x0 + cw, :]
    img = Image.fromarray(region, mode="RGB").resize((w, h), Image.BILINEAR)
    return np.asarray(img)


def _erase(px: np.ndarray, params: dict, seed: int) -> np.ndarray:
    h, w = px.shape[:2]
    u = rng.uniforms(rng.mix(seed, "erase"), 4)
    area = (params["min_area"] + (params["max_area"] - params["min_area"]) * u[0]) * w * h
    aspect = params["min_aspect"] + (params["max_aspect"] - params["min_aspect"]) * u[1]
    ew = min(w, max(1, int(round(np.sqrt(area * aspect)))))
    eh = min(h, max(1, int(round(np.sqrt(area / aspect)))))
    x0 = int(u[2] * (w - ew + 1))
    y0 = int(u[3] * (h - eh + 1))
    out = px.copy()
    out[y0 : y0 + eh, x0 : x0 + ew, :] = 128
    return out


def _sharp(px: np.ndarray, params: dict) -> np.ndarray:
    img = px.astype(np.float64)
    blur = ndimage.gaussian_filter(img, sigma=(params["sigma"], params["sigma"], 0))
    out = img + params["strength"] * (img - blur)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _edge(px: np.ndarray) -> np.ndarray:
    luma = px.astype(np.float64) @ _LUMA
    gx = ndimage.sobel(luma, axis=1)
    gy = ndimage.sobel(luma, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag * (255.0 / peak)
    gray = np.clip(np.rint(mag), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _noise(px: np.ndarray, params: dict, seed: int) -> np.ndarray:
    t, steps = int(params["t"]), int(params["steps"])
    if not 1 <= t <= steps:
        raise ValueError(f"noise step t={t} outside [1, {steps}]")
    betas = np.linspace(params["beta_start"], params["beta_end"], steps)
    alpha_bar = float(np.cumprod(1.0 - betas)[t - 1])
    x0 = px.astype(np.float64) / 127.5 - 1.0
    eps = rng.gaussians(rng.mix(seed, "noise"), px.size).reshape(px.shape)
    xt = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
    out = (xt + 1.0) * 127.5
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply(op: AugmentationOp, img: ImageBuffer) -> ImageBuffer:
    """Apply one augmentation, returning a new image of identical shape."""
    px = img.pixels
    if op.kind in ("crop", "erase") and (img.width < 8 or img.height < 8):
        raise ImageTooSmallError(
            f"image-too-small: {op.kind} needs at least 8x8, got {img.width}x{img.height}"
        )
    if op.kind == IDENTITY_KIND:
        out = px.copy()
    elif op.kind == "color":
        out = _color(px)
    elif op.kind == "flip":
        out = _flip(px)
    elif op.kind == "crop":
        out = _crop(px, op.params, op.seed)
    elif op.kind == "erase":
        out = _erase(px, op.params, op.seed)
    elif op.kind == "sharp":
        out = _sharp(px, op.params)
    elif op.kind == "edge":
        out = _edge(px)
    elif op.kind == "noise":
        out = _noise(px, op.params, op.seed)
    else:  # pragma: no cover - guarded by AugmentationOp validation
        raise ValueError(op.kind)
    return ImageBuffer.from_array(out)
