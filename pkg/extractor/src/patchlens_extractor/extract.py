"""One-pass frozen extraction into the patchlens embedding container."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from patchlens.formats import EmbeddingSet, write_embeddings

from .backbones import get_backbone
from .data import (Sample, image_size_of, load_image, load_pixel_mask,
                   scan_split, tokenize_mask)

log = logging.getLogger("patchlens_extractor")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExtractionSpec:
    backbone: str
    data_root: str
    split: str
    out_path: str
    mask_dir: str | None = None
    image_size: int = 224
    batch_size: int = 8
    mean: tuple[float, float, float] = field(default=IMAGENET_MEAN)
    std: tuple[float, float, float] = field(default=IMAGENET_STD)

    def validate(self) -> None:
        if self.image_size <= 0 or self.batch_size <= 0:
            raise ValueError("image_size and batch_size must be positive")


def extract(spec: ExtractionSpec) -> EmbeddingSet:
    """Embed every image of the split and write one EmbeddingSet file.

    Patch tokens and the CLS token are stored; register tokens are
    dropped. Pixel masks are tokenized to the patch grid by majority
    vote. A sample whose mask does not match its image shape is skipped
    and logged rather than failing the whole pass.
    """
    spec.validate()
    backbone = get_backbone(spec.backbone)
    if spec.image_size % backbone.patch_size:
        raise ValueError(
            f"image size {spec.image_size} is not a multiple of the "
            f"backbone's patch size {backbone.patch_size}")
    grid = spec.image_size // backbone.patch_size
    samples, classes = scan_split(spec.data_root, spec.split, spec.mask_dir)

    with_masks = spec.mask_dir is not None
    kept: list[Sample] = []
    masks: list[np.ndarray] = []
    for s in samples:
        if not with_masks:
            kept.append(s)
            continue
        if s.mask_path is None:
            log.warning("skipping %s: no mask found", s.path)
            continue
        if image_size_of(s.mask_path) != image_size_of(s.path):
            log.warning("skipping %s: mask %s does not match image size",
                        s.path, s.mask_path)
            continue
        kept.append(s)
        masks.append(tokenize_mask(load_pixel_mask(s.mask_path), grid))
    if not kept:
        raise FileNotFoundError("no usable samples after mask matching")

    labels = np.array([s.label for s in kept], dtype=np.uint32)
    all_cls = np.empty((len(kept), backbone.dim), dtype=np.float32)
    all_patches = np.empty((len(kept), grid * grid, backbone.dim),
                           dtype=np.float32)
    for start in range(0, len(kept), spec.batch_size):
        chunk = kept[start:start + spec.batch_size]
        batch = np.stack([load_image(s.path, spec.image_size, spec.mean,
                                     spec.std) for s in chunk])
        cls, _registers, patches = backbone.embed(batch)
        if patches.shape[1] != grid * grid:
            raise RuntimeError(
                f"backbone produced {patches.shape[1]} patch tokens, "
                f"expected {grid * grid}")
        all_cls[start:start + len(chunk)] = cls
        all_patches[start:start + len(chunk)] = patches

    es = EmbeddingSet(h_f=grid, w_f=grid, d=backbone.dim,
                      n_classes=len(classes), labels=labels,
                      patches=all_patches,
                      masks=np.stack(masks) if with_masks else None,
                      cls=all_cls)
    es.validate()
    write_embeddings(es, spec.out_path)
    log.info("wrote %s: %d samples, %dx%d grid, dim %d",
             spec.out_path, es.n, grid, grid, backbone.dim)
    return es
