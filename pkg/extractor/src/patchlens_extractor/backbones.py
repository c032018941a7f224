"""Vision backbones that emit CLS, register, and patch tokens.

Every backbone runs frozen in eval mode under no_grad, so repeated
extraction of the same inputs is bit-reproducible. The toy ViT exists
for tests and pipeline dry-runs: architecture-shaped like the real
thing (patchify conv, position embeddings, transformer blocks, CLS and
optional register tokens) but with fixed-seed random weights, so it
needs no checkpoint download.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


class Backbone:
    """Interface: patch_size, dim, n_registers, and embed()."""

    patch_size: int
    dim: int
    n_registers: int

    def embed(self, images: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """[B, 3, H, W] float32 -> (cls [B, D], registers [B, R, D],
        patches [B, P, D]) with P in row-major grid order."""
        raise NotImplementedError


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(),
                                 nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyViT(Backbone):
    """Deterministic randomly-initialized ViT; weights fixed by seed."""

    def __init__(self, patch_size: int = 16, dim: int = 48, depth: int = 2,
                 heads: int = 4, n_registers: int = 4, seed: int = 0,
                 max_grid: int = 32):
        self.patch_size = patch_size
        self.dim = dim
        self.n_registers = n_registers
        torch.manual_seed(seed)
        self._patchify = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self._specials = nn.Parameter(torch.randn(1 + n_registers, dim) * 0.02)
        self._pos = nn.Parameter(torch.randn(max_grid * max_grid, dim) * 0.02)
        self._blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self._norm = nn.LayerNorm(dim)
        for mod in (self._patchify, *self._blocks, self._norm):
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)

    def embed(self, images: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W], got {images.shape}")
        h, w = images.shape[2], images.shape[3]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"image size {h}x{w} is not a multiple of patch {self.patch_size}")
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
            tok = self._patchify(x).flatten(2).transpose(1, 2)  # [B, P, D]
            n_p = tok.shape[1]
            if n_p > self._pos.shape[0]:
                raise ValueError(f"grid of {n_p} patches exceeds the toy limit")
            tok = tok + self._pos[:n_p]
            specials = self._specials.unsqueeze(0).expand(tok.shape[0], -1, -1)
            seq = torch.cat([specials, tok], dim=1)
            for block in self._blocks:
                seq = block(seq)
            seq = self._norm(seq)
        out = seq.numpy().astype(np.float32)
        cls = out[:, 0]
        registers = out[:, 1:1 + self.n_registers]
        patches = out[:, 1 + self.n_registers:]
        return cls, registers, patches


_DINO_HUB = "facebookresearch/dinov2"
_DINO_NAMES = ("dinov2_vits14", "dinov2_vitb14", "dinov2_vitl14",
               "dinov2_vits14_reg", "dinov2_vitb14_reg", "dinov2_vitl14_reg")


class _DinoWrapper(Backbone):
    def __init__(self, name: str):
        try:
            hub_model = torch.hub.load(_DINO_HUB, name, verbose=False)
        except Exception as e:  # no local weights, no network
            raise RuntimeError(
                f"backbone {name} requires locally cached weights "
                f"(torch.hub {_DINO_HUB}): {e}") from e
        self._model = hub_model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.patch_size = int(self._model.patch_size)
        self.dim = int(self._model.embed_dim)
        self.n_registers = int(getattr(self._model, "num_register_tokens", 0))

    def embed(self, images: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
            out = self._model.forward_features(x)
        cls = out["x_norm_clstoken"].numpy().astype(np.float32)
        patches = out["x_norm_patchtokens"].numpy().astype(np.float32)
        reg = out.get("x_norm_regtokens")
        registers = (reg.numpy().astype(np.float32) if reg is not None
                     else np.zeros((cls.shape[0], 0, self.dim), np.float32))
        return cls, registers, patches


def get_backbone(name: str) -> Backbone:
    """'toy-vit', 'toy-vit-noreg', or a dinov2 hub id with local weights."""
    if name == "toy-vit":
        return ToyViT()
    if name == "toy-vit-noreg":
        return ToyViT(n_registers=0)
    if name in _DINO_NAMES:
        return _DinoWrapper(name)
    raise ValueError(f"unknown backbone {name!r}; choose toy-vit, "
                     f"toy-vit-noreg, or one of {', '.join(_DINO_NAMES)}")
