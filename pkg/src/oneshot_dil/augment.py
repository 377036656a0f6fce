"""Random geometric augmentation on (C, H, W) float images in [0, 1].

Each family (resized crop, affine, rotation, perspective) is expressed as a
3x3 matrix taking *output* pixel coordinates ``(x=col, y=row, 1)`` to source
coordinates, then sampled bilinearly with zeros outside the source.  The
families are applied in a fixed order: crop, affine, rotation, perspective.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class AugmentConfig:
    rotation_degrees: float = 15.0
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    translate: float = 0.1
    shear_degrees: float = 10.0
    perspective_scale: float = 0.3
    p_crop: float = 0.5
    p_affine: float = 0.5
    p_rotation: float = 0.5
    p_perspective: float = 0.5

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.crop_ratio = tuple(float(v) for v in self.crop_ratio)
        errors = []
        if not 0 <= self.rotation_degrees < 180:
            errors.append("rotation_degrees must lie in [0, 180)")
        if not 0 <= self.shear_degrees < 90:
            errors.append("shear_degrees must lie in [0, 90)")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            errors.append("crop_scale must satisfy 0 < min <= max <= 1")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            errors.append("crop_ratio must satisfy 0 < min <= max")
        for name in ("translate", "perspective_scale", "p_crop", "p_affine", "p_rotation", "p_perspective"):
            if not 0 <= getattr(self, name) <= 1:
                errors.append(f"{name} must lie in [0, 1]")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["crop_ratio"] = list(self.crop_ratio)
        return d


@dataclass
class ImageSample:
    image: np.ndarray  # (C, H, W)
    label: int


def _center(h: int, w: int) -> tuple[float, float]:
    return (w - 1) / 2.0, (h - 1) / 2.0


def _about_center(a: np.ndarray, h: int, w: int) -> np.ndarray:
    cx, cy = _center(h, w)
    to = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    back = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    return to @ a @ back


def warp(img: np.ndarray, out_to_src: np.ndarray) -> np.ndarray:
    """Resample ``img`` at ``out_to_src @ (x, y, 1)`` for every output pixel."""
    c, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = out_to_src @ np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    sx, sy = pts[0] / pts[2], pts[1] / pts[2]
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = sx - x0, sy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    out = np.zeros((c, h * w))
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt != 0)
        out[:, ok] += wt[ok] * img[:, yi[ok], xi[ok]]
    return out.reshape(c, h, w)


def crop_matrix(h: int, w: int, top: float, left: float, ch: float, cw: float) -> np.ndarray:
    return np.array([[cw / w, 0, left + 0.5 * cw / w - 0.5],
                     [0, ch / h, top + 0.5 * ch / h - 0.5],
                     [0, 0, 1.0]])


def rotation_matrix(h: int, w: int, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    # inverse of a counter-clockwise rotation
    r = np.array([[math.cos(a), math.sin(a), 0], [-math.sin(a), math.cos(a), 0], [0, 0, 1.0]])
    return _about_center(r, h, w)


def affine_matrix(h: int, w: int, tx: float, ty: float, shear_degrees: float) -> np.ndarray:
    k = math.tan(math.radians(shear_degrees))
    fwd = np.array([[1, k, tx], [0, 1, ty], [0, 0, 1.0]])
    return _about_center(np.linalg.inv(fwd), h, w)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the four points ``src`` onto ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    coef = np.linalg.solve(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(coef, 1.0).reshape(3, 3)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    return np.clip(warp(img, rotation_matrix(*img.shape[1:], degrees)), 0.0, 1.0)


def _sample_crop(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator):
    area = h * w
    log_r = np.log(cfg.crop_ratio)
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    # fallback: largest centered crop with an in-range aspect ratio
    ratio = w / h
    if ratio < cfg.crop_ratio[0]:
        cw, ch = w, max(1, int(round(w / cfg.crop_ratio[0])))
    elif ratio > cfg.crop_ratio[1]:
        ch, cw = h, max(1, int(round(h * cfg.crop_ratio[1])))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def sample_matrices(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Draw the per-family matrices for one transform, in application order."""
    mats = []
    if rng.random() < cfg.p_crop:
        mats.append(crop_matrix(h, w, *_sample_crop(h, w, cfg, rng)))
    if rng.random() < cfg.p_affine:
        tx = rng.uniform(-cfg.translate, cfg.translate) * w
        ty = rng.uniform(-cfg.translate, cfg.translate) * h
        mats.append(affine_matrix(h, w, tx, ty, rng.uniform(-cfg.shear_degrees, cfg.shear_degrees)))
    if rng.random() < cfg.p_rotation:
        mats.append(rotation_matrix(h, w, rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)))
    if rng.random() < cfg.p_perspective:
        d = cfg.perspective_scale
        hw, hh = (w // 2) * d, (h // 2) * d
        start = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        jitter = rng.uniform(0, 1, (4, 2)) * np.array([hw, hh])
        end = start + np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]]) * jitter
        mats.append(homography(end, start))
    return mats


def transform_image(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = img
    for m in sample_matrices(img.shape[1], img.shape[2], cfg, rng):
        out = np.clip(warp(out, m), 0.0, 1.0)
    return out if out is not img else img.copy()


def transform(sample: ImageSample, cfg: AugmentConfig, rng: np.random.Generator) -> ImageSample:
    """One random draw of the augmentation; the label is carried over."""
    return ImageSample(transform_image(sample.image, cfg, rng), sample.label)


def replicate(x0: ImageSample, m: int, cfg: AugmentConfig, rng: np.random.Generator) -> list[ImageSample]:
    if m < 1:
        raise ValueError(f"copy count must be >= 1, got {m}")
    return [transform(x0, cfg, rng) for _ in range(m)]
