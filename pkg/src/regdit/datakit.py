"""Datasets: a synthetic class-conditional shape set and a class-subfolder
image loader. Images are float tensors in [-1, 1], shape [N, C, H, W]."""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor
from torch.nn import functional as F

log = logging.getLogger(__name__)

SHAPES = ("square", "disk", "bar", "cross")
NATIVE_SUFFIXES = (".ppm", ".pgm", ".pnm")


@dataclass
class Dataset:
    images: Tensor  # [N, C, H, W] in [-1, 1]
    labels: Tensor  # [N] int64
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def check(self, min_per_class: int = 1) -> None:
        if self.images.min() < -1 or self.images.max() > 1:
            raise ValueError("pixels outside [-1, 1]")
        counts = torch.bincount(self.labels, minlength=self.num_classes)
        if (counts < min_per_class).any():
            raise ValueError(f"class counts {counts.tolist()} below {min_per_class}")


def class_color(k: int, num_classes: int) -> np.ndarray:
    """Fill color for class k in [-1, 1]^3: evenly spaced hues, two brightness tiers."""
    hue = (k % max(1, (num_classes + 1) // 2)) / max(1, (num_classes + 1) // 2)
    value = 1.0 if k < (num_classes + 1) // 2 else 0.6
    rgb = colorsys.hsv_to_rgb(hue, 0.9, value)
    return np.asarray(rgb) * 2 - 1


def _render(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one shape with random position and scale."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    half = rng.uniform(0.18, 0.32) * size
    cy, cx = rng.uniform(half, size - half, size=2)
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "disk":
        return dy**2 + dx**2 <= half**2
    thick = max(1.0, half * 0.35)
    if kind == "bar":
        return (np.abs(dy) <= thick) & (np.abs(dx) <= half)
    return ((np.abs(dy) <= thick) & (np.abs(dx) <= half)) | ((np.abs(dx) <= thick) & (np.abs(dy) <= half))


def synthetic_image(k: int, index: int, num_classes: int, image: int, seed: int,
                    channels: int = 3) -> np.ndarray:
    rng = np.random.default_rng([seed, k, index])
    mask = _render(SHAPES[k % 4], image, rng)
    background = rng.uniform(-1.0, -0.6, size=channels)
    color = class_color(k, num_classes)[:channels] if channels == 3 else \
        np.full(channels, -0.4 + 1.4 * k / max(1, num_classes - 1))
    img = np.where(mask[None], color[:, None, None], background[:, None, None])
    img = img + rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


def gen_synthetic(num_classes: int, per_class: int, image: int, seed: int = 0,
                  channels: int = 3) -> Dataset:
    """Balanced dataset; class k draws shape ``SHAPES[k % 4]`` in a class color.

    Each image depends only on (seed, class, index), so generation order does
    not matter and subsets are reproducible.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    imgs = [synthetic_image(k, i, num_classes, image, seed, channels)
            for k in range(num_classes) for i in range(per_class)]
    labels = torch.arange(num_classes).repeat_interleave(per_class)
    ds = Dataset(torch.from_numpy(np.stack(imgs)), labels, num_classes)
    ds.check()
    return ds


# --- normalization and image files ----------------------------------------------------

def normalize(pixels) -> Tensor:
    """uint8-range pixels -> [-1, 1] via x / 127.5 - 1."""
    return torch.as_tensor(np.asarray(pixels), dtype=torch.float32) / 127.5 - 1


def denormalize(x: Tensor) -> np.ndarray:
    return np.clip(np.round((x.detach().cpu().numpy() + 1) * 127.5), 0, 255).astype(np.uint8)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Read binary P5/P6 (or ASCII P2/P3) 8-bit images as [H, W, C] uint8."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"{path}: not a PGM/PPM file")
    w, pos = _read_token(data, pos)
    h, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    c = 3 if magic in (b"P3", b"P6") else 1
    if magic in (b"P5", b"P6"):
        raw = np.frombuffer(data[pos + 1 : pos + 1 + w * h * c], dtype=np.uint8)
    else:
        raw = np.asarray(data[pos:].split()[: w * h * c], dtype=np.int64).astype(np.uint8)
    if raw.size != w * h * c:
        raise ValueError(f"{path}: truncated pixel data")
    arr = raw.reshape(h, w, c)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return arr


def write_pnm(path: str | Path, pixels: np.ndarray) -> None:
    """Write [H, W] or [H, W, 1|3] uint8 as binary PGM/PPM."""
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    magic = b"P5" if arr.ndim == 2 else b"P6"
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_any(path: Path) -> np.ndarray:
    if path.suffix.lower() in NATIVE_SUFFIXES:
        return read_pnm(path)
    from PIL import Image  # optional adapter for compressed formats

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def center_crop_resize(arr: np.ndarray, image: int) -> np.ndarray:
    """[H, W, C] uint8 -> [C, image, image] float pixels (0..255)."""
    h, w = arr.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = torch.from_numpy(np.ascontiguousarray(arr[top : top + s, left : left + s])).float()
    crop = crop.permute(2, 0, 1)[None]
    if s != image:
        crop = F.interpolate(crop, size=(image, image), mode="bilinear", antialias=True,
                             align_corners=False)
    return crop[0].clamp(0, 255).numpy()


def load_folder(path: str | Path, image: int, channels: int = 3) -> Dataset:
    """Load ``path/<class>/<file>``; classes are sorted subfolder names."""
    root = Path(path)
    classes = sorted(d for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subfolders")
    imgs, labels = [], []
    for k, d in enumerate(classes):
        n_before = len(imgs)
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            try:
                arr = _read_any(f)
            except Exception as e:  # unreadable files are skipped, not fatal
                log.warning("skipping %s: %s", f, e)
                continue
            if arr.shape[2] == 1 and channels == 3:
                arr = np.repeat(arr, 3, axis=2)
            elif arr.shape[2] == 3 and channels == 1:
                arr = np.round(arr.mean(axis=2, keepdims=True)).astype(np.uint8)
            imgs.append(normalize(center_crop_resize(arr, image)))
            labels.append(k)
        if len(imgs) == n_before:
            raise ValueError(f"{d}: class folder has no readable images")
    ds = Dataset(torch.stack(imgs), torch.tensor(labels, dtype=torch.long), len(classes))
    ds.check()
    return ds
