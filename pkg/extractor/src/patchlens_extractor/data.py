"""Dataset scanning, image loading, and mask tokenization."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

IMG_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sample:
    path: str
    label: int
    mask_path: str | None


def scan_split(data_root: str, split: str,
               mask_dir: str | None = None) -> tuple[list[Sample], list[str]]:
    """List (image, label, mask) triples for data_root/split/<class>/<img>.

    Classes are the sorted subdirectory names; labels follow that order.
    Masks mirror the class/file layout under mask_dir with any image
    extension. Missing masks leave mask_path None.
    """
    base = os.path.join(data_root, split)
    if not os.path.isdir(base):
        raise FileNotFoundError(f"split directory {base} does not exist")
    classes = sorted(d for d in os.listdir(base)
                     if os.path.isdir(os.path.join(base, d)))
    if not classes:
        raise FileNotFoundError(f"{base} contains no class directories")
    samples: list[Sample] = []
    for label, cname in enumerate(classes):
        cdir = os.path.join(base, cname)
        for fname in sorted(os.listdir(cdir)):
            if not fname.lower().endswith(IMG_EXTENSIONS):
                continue
            mask_path = None
            if mask_dir is not None:
                stem = os.path.splitext(fname)[0]
                for ext in IMG_EXTENSIONS:
                    cand = os.path.join(mask_dir, split, cname, stem + ext)
                    if os.path.exists(cand):
                        mask_path = cand
                        break
            samples.append(Sample(os.path.join(cdir, fname), label, mask_path))
    if not samples:
        raise FileNotFoundError(f"{base} contains no images")
    return samples, classes


def load_image(path: str, size: int, mean: tuple[float, float, float],
               std: tuple[float, float, float]) -> np.ndarray:
    """[3, size, size] float32, bilinear-resized and channel-normalized."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return arr.transpose(2, 0, 1)


def load_pixel_mask(path: str) -> np.ndarray:
    """[H, W] uint8 in {0,1} at the mask's native resolution."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def image_size_of(path: str) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.height, img.width


def tokenize_mask(mask: np.ndarray, grid: int) -> np.ndarray:
    """Majority vote per patch cell: >= 50% foreground pixels -> 1.

    The mask is first nearest-resized to grid*block pixels so any input
    resolution maps onto the patch grid; returns [grid*grid] uint8.
    """
    block = 16
    target = grid * block
    if mask.shape != (target, target):
        img = Image.fromarray(mask * 255)
        mask = (np.asarray(img.resize((target, target), Image.NEAREST))
                > 127).astype(np.uint8)
    cells = mask.reshape(grid, block, grid, block).astype(np.float64)
    frac = cells.mean(axis=(1, 3))
    return (frac >= 0.5).astype(np.uint8).reshape(-1)
