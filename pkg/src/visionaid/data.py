"""Image datasets as in-memory tensors in [-1, 1], shape (N, C, H, W)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class DataError(ValueError):
    pass


def two_mode_images(n: int, resolution: int = 32, seed: int = 0) -> torch.Tensor:
    """Half red squares, half green rings, random size and position on a dark noisy field."""
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float32) + 0.5
    out = np.empty((n, 3, r, r), dtype=np.float32)
    modes = np.arange(n) % 2
    rng.shuffle(modes)
    for i, mode in enumerate(modes):
        img = np.full((3, r, r), -0.8, dtype=np.float32) + 0.05 * rng.standard_normal((3, r, r)).astype(np.float32)
        cy, cx = rng.uniform(0.3 * r, 0.7 * r, size=2)
        if mode == 0:
            half = rng.uniform(0.15 * r, 0.25 * r)
            mask = (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
            img[:, mask] = np.array([0.9, -0.6, -0.6], dtype=np.float32)[:, None]
        else:
            rad = rng.uniform(0.18 * r, 0.28 * r)
            d = np.hypot(yy - cy, xx - cx)
            mask = np.abs(d - rad) < 0.06 * r
            img[:, mask] = np.array([-0.6, 0.9, -0.4], dtype=np.float32)[:, None]
        out[i] = img
    return torch.from_numpy(np.clip(out, -1, 1))


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    if arr.ndim == 3:
        arr = arr[..., None] if arr.shape[-1] not in (1, 3) else arr[None]
    if arr.ndim != 4:
        raise DataError(f"expected an image array of rank 4, got shape {arr.shape}")
    if arr.shape[-1] in (1, 3) and arr.shape[1] not in (1, 3):
        arr = arr.transpose(0, 3, 1, 2)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def load_images(path: str | Path) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: dataset not found")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            npys = sorted(path.glob("*.npy")) + sorted(path.glob("*.npz"))
            if len(npys) == 1:
                return load_images(npys[0])
            raise DataError(f"{path}: no images found")
        from PIL import Image

        arrs = [np.asarray(Image.open(f).convert("RGB")) for f in files]
        return _to_tensor(np.stack(arrs))
    if path.suffix == ".npy":
        return _to_tensor(np.load(path))
    if path.suffix == ".npz":
        with np.load(path) as z:
            key = "images" if "images" in z else z.files[0]
            return _to_tensor(z[key])
    raise DataError(f"{path}: unsupported dataset format")


def load_dataset(cfg) -> torch.Tensor:
    """Resolve a DataConfig into a (N, C, H, W) tensor at the configured resolution."""
    if cfg.path.startswith("synthetic:"):
        kind = cfg.path.split(":", 1)[1]
        if kind != "two_mode":
            raise DataError(f"unknown synthetic dataset {kind!r}")
        images = two_mode_images(cfg.n_samples or 1000, cfg.resolution, cfg.seed)
    else:
        images = load_images(cfg.path)
        if cfg.n_samples and len(images) > cfg.n_samples:
            images = images[: cfg.n_samples]
    if len(images) == 0:
        raise DataError("dataset is empty")
    if images.shape[-1] != cfg.resolution or images.shape[-2] != cfg.resolution:
        from .bank import resize

        images = resize(images, cfg.resolution)
    if images.shape[1] != cfg.channels:
        if images.shape[1] == 1 and cfg.channels == 3:
            images = images.expand(-1, 3, -1, -1).contiguous()
        else:
            raise DataError(f"dataset has {images.shape[1]} channels, config expects {cfg.channels}")
    return images
