"""Desk-scale synthetic embedding sets with known part structure.

Each image is a patch grid: a connected object mask is grown cell by
cell, a fixed per-class subset of part prototype vectors is dropped at
random in-mask positions, label-irrelevant distractor prototypes land
outside the mask, and everything else is Gaussian noise. Distractors
share nothing with the part span (all prototypes come from one
orthogonal basis), so the construction stays separable while the
background still contains structure a lazy feature can latch onto.
At zero noise a nearest-prototype classifier separates the classes
perfectly, which is what the oracle tests lean on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import EmbeddingSet, write_embeddings
from .rng import stream


@dataclass
class SynthConfig:
    n_classes: int
    n_parts: int
    parts_per_class: int
    grid: int
    dim: int
    noise: float
    mask_frac: float = 0.4
    amplitude: float = 3.0
    disjoint_parts: bool = False
    distractor_pool: int = 6
    distractors: int = 3
    distractor_bias: float = 0.7
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mask_area(self) -> int:
        # blobs are grown to exactly this many cells
        return max(1, int(round(self.mask_frac * self.n_patches)))

    def validate(self) -> None:
        if min(self.n_classes, self.n_parts, self.parts_per_class,
               self.grid, self.dim) <= 0:
            raise ValueError("classes, parts, grid, and dim must be positive")
        if self.noise < 0.0:
            raise ValueError("noise must be non-negative")
        if not 0.0 < self.mask_frac <= 1.0:
            raise ValueError("mask_frac must lie in (0, 1]")
        if self.parts_per_class > self.n_parts:
            raise ValueError(
                f"each class uses {self.parts_per_class} parts but only "
                f"{self.n_parts} prototypes exist")
        if self.n_parts > self.dim:
            raise ValueError(
                f"{self.n_parts} orthogonal prototypes do not fit in "
                f"{self.dim} dimensions")
        if self.mask_area < self.parts_per_class:
            raise ValueError(
                f"infeasible geometry: object covers {self.mask_area} patches "
                f"but {self.parts_per_class} parts need distinct cells")
        if self.disjoint_parts and self.n_classes * self.parts_per_class > self.n_parts:
            raise ValueError(
                f"disjoint classes need {self.n_classes * self.parts_per_class} "
                f"prototypes, only {self.n_parts} exist")
        if math.comb(self.n_parts, self.parts_per_class) < self.n_classes:
            raise ValueError("fewer distinct part subsets than classes")
        if self.distractors < 0 or self.distractor_pool < 0:
            raise ValueError("distractor counts must be >= 0")
        if self.distractors > 0 and self.distractor_pool == 0:
            raise ValueError("distractors need a non-empty distractor pool")
        if self.distractors > self.distractor_pool:
            raise ValueError(
                f"{self.distractors} distractors per image exceed the pool "
                f"of {self.distractor_pool}")
        if self.n_parts + self.distractor_pool > self.dim:
            raise ValueError(
                f"{self.n_parts} parts + {self.distractor_pool} distractors "
                f"do not fit {self.dim} orthogonal directions")
        if self.distractors > self.n_patches - self.mask_area:
            raise ValueError(
                f"infeasible geometry: {self.distractors} distractors need "
                f"cells outside a {self.mask_area}-patch object")
        if not 0.0 <= self.distractor_bias <= 1.0:
            raise ValueError("distractor_bias must lie in [0, 1]")


def _orthogonal_basis(cfg: SynthConfig) -> np.ndarray:
    g = stream(cfg.seed, "synth", "prototypes").normal(size=(cfg.dim, cfg.dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity so the basis is unique
    return q.T


def part_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Orthonormal prototype directions scaled to cfg.amplitude, [n_parts, dim]."""
    basis = _orthogonal_basis(cfg)
    return (basis[: cfg.n_parts] * cfg.amplitude).astype(np.float64)


def distractor_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Background clutter directions, orthogonal to every part prototype.

    Orthogonality keeps the construction separable: distractor energy is
    invisible to any classifier operating in the part span.
    """
    basis = _orthogonal_basis(cfg)
    rows = basis[cfg.n_parts: cfg.n_parts + cfg.distractor_pool]
    return (rows * cfg.amplitude).astype(np.float64)


def class_part_table(cfg: SynthConfig) -> np.ndarray:
    """Sorted part ids per class, [n_classes, parts_per_class].

    Disjoint mode slices the pool into consecutive blocks; otherwise each
    class draws a random subset, re-drawing on collision so no two classes
    share the exact same subset.
    """
    ppc = cfg.parts_per_class
    if cfg.disjoint_parts:
        return np.arange(cfg.n_classes * ppc, dtype=np.int64).reshape(cfg.n_classes, ppc)
    rng = stream(cfg.seed, "synth", "class-parts")
    table: list[tuple[int, ...]] = []
    for c in range(cfg.n_classes):
        for _ in range(1000):
            pick = tuple(sorted(rng.choice(cfg.n_parts, size=ppc, replace=False).tolist()))
            if pick not in table:
                table.append(pick)
                break
        else:
            raise ValueError("could not draw distinct part subsets for all classes")
    return np.asarray(table, dtype=np.int64)


def make_blob_mask(h: int, w: int, area: int, rng: np.random.Generator) -> np.ndarray:
    """Grow a 4-connected blob of exactly ``area`` cells, uint8 {0,1}."""
    if not 1 <= area <= h * w:
        raise ValueError(f"blob of {area} cells does not fit a {h}x{w} grid")
    mask = np.zeros((h, w), dtype=np.uint8)
    y0 = int(rng.integers(h))
    x0 = int(rng.integers(w))
    mask[y0, x0] = 1
    # frontier may hold duplicates; that biases growth toward cells with
    # several blob neighbours, which keeps the blobs compact
    frontier: list[tuple[int, int]] = []

    def push_neighbours(y: int, x: int) -> None:
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx]:
                frontier.append((ny, nx))

    push_neighbours(y0, x0)
    count = 1
    while count < area:
        idx = int(rng.integers(len(frontier)))
        y, x = frontier.pop(idx)
        if mask[y, x]:
            continue
        mask[y, x] = 1
        count += 1
        push_neighbours(y, x)
    return mask


def preferred_distractors(cfg: SynthConfig, class_id: int) -> list[int]:
    """The clutter a class's habitat favours: a rotating pool window."""
    return [(class_id + i) % cfg.distractor_pool for i in range(cfg.distractors)]


def _draw_distractors(cfg: SynthConfig, class_id: int,
                      rng: np.random.Generator) -> list[int]:
    """Distinct distractor ids, each slot taking the class-preferred one
    with probability distractor_bias and a uniform leftover otherwise.

    The bias makes the background correlated with the label without being
    needed for it: the rotating windows overlap between classes, so clutter
    alone cannot separate them while the parts always can.
    """
    preferred = preferred_distractors(cfg, class_id)
    chosen: list[int] = []
    for i in range(cfg.distractors):
        pick = None
        if rng.random() < cfg.distractor_bias and preferred[i] not in chosen:
            pick = preferred[i]
        if pick is None:
            leftovers = [d for d in range(cfg.distractor_pool) if d not in chosen]
            pick = leftovers[int(rng.integers(len(leftovers)))]
        chosen.append(pick)
    return chosen


def make_sample(cfg: SynthConfig, prototypes: np.ndarray,
                distractor_protos: np.ndarray, part_ids: np.ndarray,
                class_id: int, rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One image: (mask [P] uint8, cls [D] f32, patches [P, D] f32).

    Class parts land on distinct in-mask cells; distractor prototypes
    land on distinct off-mask cells. The class-biased distractor draw
    gives the background a label correlation that a classifier may lean
    on but never needs.
    """
    p = cfg.n_patches
    mask = make_blob_mask(cfg.grid, cfg.grid, cfg.mask_area, rng).reshape(-1)
    cells = np.flatnonzero(mask)
    positions = rng.choice(cells, size=cfg.parts_per_class, replace=False)
    if cfg.distractors > 0:
        off_cells = np.flatnonzero(mask == 0)
        d_positions = rng.choice(off_cells, size=cfg.distractors, replace=False)
        d_ids = _draw_distractors(cfg, class_id, rng)
    patches = rng.normal(0.0, cfg.noise, size=(p, cfg.dim))
    for pos, part in zip(positions, part_ids):
        patches[pos] += prototypes[part]
    if cfg.distractors > 0:
        for pos, d in zip(d_positions, d_ids):
            patches[pos] += distractor_protos[d]
    cls = patches.mean(axis=0) + rng.normal(0.0, cfg.noise, size=cfg.dim)
    return mask, cls.astype(np.float32), patches.astype(np.float32)


def generate_split(cfg: SynthConfig, split: str, per_class: int) -> EmbeddingSet:
    """Materialise ``per_class`` samples for every class as one EmbeddingSet."""
    cfg.validate()
    if per_class <= 0:
        raise ValueError("per_class must be positive")
    prototypes = part_prototypes(cfg)
    distractor_protos = distractor_prototypes(cfg)
    table = class_part_table(cfg)
    n = cfg.n_classes * per_class
    labels = np.empty(n, dtype=np.uint32)
    masks = np.empty((n, cfg.n_patches), dtype=np.uint8)
    cls = np.empty((n, cfg.dim), dtype=np.float32)
    patches = np.empty((n, cfg.n_patches, cfg.dim), dtype=np.float32)
    i = 0
    for c in range(cfg.n_classes):
        for j in range(per_class):
            rng = stream(cfg.seed, "synth", split, c, j)
            masks[i], cls[i], patches[i] = make_sample(
                cfg, prototypes, distractor_protos, table[c], c, rng)
            labels[i] = c
            i += 1
    out = EmbeddingSet(h_f=cfg.grid, w_f=cfg.grid, d=cfg.dim,
                       n_classes=cfg.n_classes, labels=labels, patches=patches,
                       masks=masks, cls=cls)
    out.validate()
    return out


def write_split(cfg: SynthConfig, split: str, per_class: int, path: str) -> EmbeddingSet:
    data = generate_split(cfg, split, per_class)
    write_embeddings(data, path)
    return data
