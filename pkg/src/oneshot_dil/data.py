"""Datasets: IDX ingestion and a Gaussian-class synthetic image generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import ImageSample

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx])


def _read(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse a big-endian IDX image/label pair; pixels scaled to [0, 1]."""
    img, lab = _read(images_path), _read(labels_path)
    if len(img) < 16:
        raise IdxError(f"{images_path}: truncated header at byte {len(img)} (need 16)")
    magic, n, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IMAGES_MAGIC:
        raise IdxError(f"{images_path}: bad magic 0x{magic:08x} at byte 0")
    need = 16 + n * rows * cols
    if len(img) < need:
        raise IdxError(f"{images_path}: truncated pixel data at byte {len(img)} (need {need})")
    if len(lab) < 8:
        raise IdxError(f"{labels_path}: truncated header at byte {len(lab)} (need 8)")
    lmagic, ln = struct.unpack_from(">II", lab, 0)
    if lmagic != LABELS_MAGIC:
        raise IdxError(f"{labels_path}: bad magic 0x{lmagic:08x} at byte 0")
    if ln != n:
        raise IdxError(f"count mismatch: {n} images vs {ln} labels (byte 4)")
    if len(lab) < 8 + n:
        raise IdxError(f"{labels_path}: truncated labels at byte {len(lab)} (need {8 + n})")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    return Dataset(pixels.reshape(n, 1, rows, cols) / 255.0, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path,
              labels_path: str | Path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass
class SyntheticSpec:
    """Images ``clip(window * (offset + pixel_scale * basis . z + noise), 0, 1)``
    with ``z ~ N(mean_k, cov_k)`` and i.i.d. pixel noise of std ``noise_std``
    (or ``class_noise_std[k]``).

    ``basis`` holds ``latent_dim`` smooth patterns; the first ``flat_dims`` are
    spatially constant (per-image brightness, each with a random channel mix).
    ``envelope > 0`` multiplies the whole image by a flat-top window
    ``exp(-(r / envelope)**8)`` (``r`` in units of the side, from the center),
    so images fade to black at the border as digits do.  ``class_means`` /
    ``class_covs`` default to random means with spread ``separation`` and
    isotropic covariance ``class_std**2``.
    """

    num_classes: int = 4
    image_side: int = 16
    channels: int = 1
    samples_per_class: int = 500
    latent_dim: int = 6
    flat_dims: int = 1
    separation: float = 1.0
    class_std: float = 0.5
    noise_std: float = 0.0
    pixel_scale: float = 0.15
    offset: float = 0.5
    envelope: float = 0.0
    class_means: list[list[float]] | None = None
    class_covs: list[list[list[float]]] | None = None
    class_noise_std: list[float] | None = None
    per_class_samples: list[int] | None = field(default=None)

    def __post_init__(self):
        errors = []
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
        if self.image_side < 2 or self.channels < 1 or self.latent_dim < 1:
            errors.append("image_side >= 2, channels >= 1 and latent_dim >= 1 required")
        if not 0 <= self.flat_dims <= self.latent_dim:
            errors.append("flat_dims must lie in [0, latent_dim]")
        if self.envelope < 0:
            errors.append("envelope must be >= 0")
        if self.class_std < 0 or self.noise_std < 0:
            errors.append("standard deviations must be >= 0")
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=np.float64)
            if means.shape != (self.num_classes, self.latent_dim):
                errors.append(f"class_means must have shape ({self.num_classes}, {self.latent_dim})")
            elif len({tuple(m) for m in means.tolist()}) != self.num_classes:
                errors.append("class means must be pairwise distinct")
        if self.class_covs is not None:
            covs = np.asarray(self.class_covs, dtype=np.float64)
            if covs.shape != (self.num_classes, self.latent_dim, self.latent_dim):
                errors.append("class_covs must have shape (K, latent_dim, latent_dim)")
            else:
                for k, c in enumerate(covs):
                    if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
                        errors.append(f"class_covs[{k}] is not symmetric positive semi-definite")
        if self.class_noise_std is not None and (len(self.class_noise_std) != self.num_classes
                                                 or min(self.class_noise_std) < 0):
            errors.append("class_noise_std must list one non-negative std per class")
        if self.per_class_samples is not None and len(self.per_class_samples) != self.num_classes:
            errors.append("per_class_samples must list one count per class")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self) -> dict:
        return asdict(self)


def _basis(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s, c = spec.image_side, spec.channels
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    out = []
    for k in range(spec.flat_dims):
        mix = np.ones(c) if k == 0 else rng.normal(size=c)
        out.append(np.ones((c, s, s)) * mix[:, None, None])
    for _ in range(spec.latent_dim - spec.flat_dims):
        fx, fy = rng.uniform(0.5, 2.0, 2)
        phx, phy = rng.uniform(0, 2 * np.pi, 2)
        pat = np.cos(np.pi * fx * xx + phx) * np.cos(np.pi * fy * yy + phy)
        out.append(np.broadcast_to(pat, (c, s, s)) * rng.uniform(0.5, 1.0, (c, 1, 1)))
    return np.stack(out)


def _window(spec: SyntheticSpec) -> np.ndarray | float:
    if spec.envelope <= 0:
        return 1.0
    s = spec.image_side
    yy, xx = (np.mgrid[0:s, 0:s] + 0.5) / s - 0.5
    return np.exp(-((np.hypot(yy, xx) / spec.envelope) ** 8))


def gen_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    """Labeled Gaussian-class images; deterministic for a given generator state."""
    basis = _basis(spec, rng)  # (L, C, S, S)
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
    else:
        means = rng.normal(0.0, spec.separation, (spec.num_classes, spec.latent_dim))
    if spec.class_covs is not None:
        covs = np.asarray(spec.class_covs, dtype=np.float64)
    else:
        covs = np.broadcast_to(np.eye(spec.latent_dim) * spec.class_std ** 2,
                               (spec.num_classes, spec.latent_dim, spec.latent_dim))
    counts = spec.per_class_samples or [spec.samples_per_class] * spec.num_classes
    images, labels = [], []
    for k in range(spec.num_classes):
        # eigh tolerates singular (e.g. zero) covariances
        w, v = np.linalg.eigh(covs[k])
        root = v * np.sqrt(np.clip(w, 0.0, None))
        z = means[k] + rng.standard_normal((counts[k], spec.latent_dim)) @ root.T
        img = spec.offset + spec.pixel_scale * np.tensordot(z, basis, axes=(1, 0))
        noise = spec.class_noise_std[k] if spec.class_noise_std is not None else spec.noise_std
        if noise > 0:
            img = img + rng.normal(0.0, noise, img.shape)
        images.append(np.clip(img * _window(spec), 0.0, 1.0))
        labels.append(np.full(counts[k], k))
    return Dataset(np.concatenate(images), np.concatenate(labels))


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Average-pool images by ``factor`` along both spatial axes (crop remainder)."""
    if factor <= 1:
        return ds
    n, c, h, w = ds.images.shape
    hh, ww = h // factor, w // factor
    img = ds.images[:, :, :hh * factor, :ww * factor].reshape(n, c, hh, factor, ww, factor)
    return Dataset(img.mean(axis=(3, 5)), ds.labels.copy())
