"""Bit-exact binary containers for embeddings, checkpoints, and saliency.

One flat file per artifact, little-endian, float32 payloads. Readers
validate every declared size against the physical file size before any
allocation; writers go through a temp file in the target directory and
rename, so a crash never leaves a half-written artifact behind. Each
failure mode carries a distinct ``code`` string so callers can map it to
an exit status without parsing messages.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

EMB_MAGIC = b"DQPM-EMB"
CKPT_MAGIC = b"DQPM-CKPT"
EMB_VERSION = 1
CKPT_VERSION = 1

FLAG_HAS_CLS = 1
FLAG_HAS_MASKS = 2


class FormatError(Exception):
    """Base for container errors; ``code`` identifies the failure mode."""

    code = "format"


class MagicError(FormatError):
    code = "bad-magic"


class VersionError(FormatError):
    code = "bad-version"


class TruncatedPayloadError(FormatError):
    code = "truncated"


class StructureError(FormatError):
    code = "structure"


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class EmbeddingSet:
    """Frozen-backbone patch embeddings for N samples on an H_f x W_f grid.

    ``patches`` is [N, P, D] float32 with P = H_f * W_f in row-major grid
    order; ``masks`` ([N, P] uint8 in {0,1}) and ``cls`` ([N, D] float32)
    are optional.
    """

    h_f: int
    w_f: int
    d: int
    n_classes: int
    labels: np.ndarray
    patches: np.ndarray
    masks: np.ndarray | None = None
    cls: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def p(self) -> int:
        return self.h_f * self.w_f

    def validate(self) -> None:
        n, p, d = self.n, self.p, self.d
        if min(self.h_f, self.w_f, d, self.n_classes) <= 0:
            raise StructureError("grid, embedding, and class dims must be positive")
        if self.patches.shape != (n, p, d):
            raise StructureError(
                f"patches must be [{n} x {p} x {d}], got {self.patches.shape}")
        if self.labels.shape != (n,):
            raise StructureError("labels must be one per sample")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise StructureError("label outside [0, n_classes)")
        if self.masks is not None:
            if self.masks.shape != (n, p):
                raise StructureError(f"masks must be [{n} x {p}]")
            if n and not np.isin(self.masks, (0, 1)).all():
                raise StructureError("mask bytes must be 0 or 1")
        if self.cls is not None and self.cls.shape != (n, d):
            raise StructureError(f"cls must be [{n} x {d}]")


_EMB_HEADER = struct.Struct("<8sIIIIIII")  # magic, version, N, H_f, W_f, D, N_c, flags


def write_embeddings(es: EmbeddingSet, path: str) -> None:
    es.validate()
    flags = (FLAG_HAS_CLS if es.cls is not None else 0) \
        | (FLAG_HAS_MASKS if es.masks is not None else 0)
    parts = [_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, es.n, es.h_f, es.w_f,
                              es.d, es.n_classes, flags)]
    for i in range(es.n):
        parts.append(struct.pack("<I", int(es.labels[i])))
        if es.masks is not None:
            parts.append(np.ascontiguousarray(es.masks[i], dtype=np.uint8).tobytes())
        if es.cls is not None:
            parts.append(np.ascontiguousarray(es.cls[i], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(es.patches[i], dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def _emb_header(f, path: str) -> tuple[int, int, int, int, int, bool, bool, int]:
    raw = f.read(_EMB_HEADER.size)
    if len(raw) < _EMB_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, n, h_f, w_f, d, n_c, flags = _EMB_HEADER.unpack(raw)
    if magic != EMB_MAGIC:
        raise MagicError(f"{path}: not an embedding container")
    if version != EMB_VERSION:
        raise VersionError(f"{path}: unsupported embedding version {version}")
    if min(h_f, w_f, d, n_c) == 0:
        raise StructureError(f"{path}: zero-sized dimension in header")
    has_cls = bool(flags & FLAG_HAS_CLS)
    has_masks = bool(flags & FLAG_HAS_MASKS)
    if flags & ~(FLAG_HAS_CLS | FLAG_HAS_MASKS):
        raise StructureError(f"{path}: unknown flag bits {flags:#x}")
    p = h_f * w_f
    sample_bytes = 4 + (p if has_masks else 0) + (4 * d if has_cls else 0) + 4 * p * d
    expected = _EMB_HEADER.size + n * sample_bytes
    actual = os.fstat(f.fileno()).st_size
    if actual != expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {expected} bytes, file has {actual}")
    return n, h_f, w_f, d, n_c, has_cls, has_masks, sample_bytes


def iter_embeddings(path: str):
    """Stream (label, mask|None, cls|None, patches) without loading the file.

    Returns (header_tuple, generator); the header is
    (n, h_f, w_f, d, n_classes, has_cls, has_masks).
    """
    f = open(path, "rb")
    try:
        n, h_f, w_f, d, n_c, has_cls, has_masks, sample_bytes = _emb_header(f, path)
    except BaseException:
        f.close()
        raise
    p = h_f * w_f

    def gen() -> Iterator[tuple[int, np.ndarray | None, np.ndarray | None, np.ndarray]]:
        with f:
            for i in range(n):
                raw = f.read(sample_bytes)
                if len(raw) < sample_bytes:
                    raise TruncatedPayloadError(f"{path}: sample {i} cut short")
                off = 4
                (label,) = struct.unpack_from("<I", raw, 0)
                if label >= n_c:
                    raise StructureError(f"{path}: sample {i} label {label} >= {n_c}")
                mask = None
                if has_masks:
                    mask = np.frombuffer(raw, dtype=np.uint8, count=p, offset=off).copy()
                    if not np.isin(mask, (0, 1)).all():
                        raise StructureError(f"{path}: sample {i} mask byte not 0/1")
                    off += p
                cls = None
                if has_cls:
                    cls = np.frombuffer(raw, dtype="<f4", count=d, offset=off).copy()
                    off += 4 * d
                patches = np.frombuffer(raw, dtype="<f4", count=p * d,
                                        offset=off).reshape(p, d).copy()
                yield label, mask, cls, patches

    return (n, h_f, w_f, d, n_c, has_cls, has_masks), gen()


def read_embeddings(path: str) -> EmbeddingSet:
    (n, h_f, w_f, d, n_c, has_cls, has_masks), samples = iter_embeddings(path)
    p = h_f * w_f
    labels = np.zeros(n, dtype=np.uint32)
    patches = np.zeros((n, p, d), dtype=np.float32)
    masks = np.zeros((n, p), dtype=np.uint8) if has_masks else None
    cls = np.zeros((n, d), dtype=np.float32) if has_cls else None
    for i, (label, mask, c, pt) in enumerate(samples):
        labels[i] = label
        patches[i] = pt
        if masks is not None:
            masks[i] = mask
        if cls is not None:
            cls[i] = c
    return EmbeddingSet(h_f, w_f, d, n_c, labels, patches, masks, cls)


@dataclass
class Checkpoint:
    """Serialized adapter state: geometry, head mode, and all arrays.

    ``head_mode`` is "dense" or "sparse"; sparse checkpoints also carry
    the selected feature indices and the binary class-assignment matrix.
    ``arrays`` maps parameter/buffer names to float32 arrays in a fixed
    order that the writer preserves, so identical states serialize to
    identical bytes. ``config_hash`` is 32 opaque bytes tying the artifact
    to the resolved run configuration.
    """

    head_mode: str
    n_layers: int
    in_dim: int
    hidden: int
    n_features: int
    n_classes: int
    dropout_p: float
    bn_momentum: float
    bn_eps: float
    config_hash: bytes
    selected: np.ndarray | None = None
    assignment: np.ndarray | None = None
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


_CKPT_FIXED = struct.Struct("<9sIBIIIIIfff")


def write_checkpoint(ck: Checkpoint, path: str) -> None:
    if ck.head_mode not in ("dense", "sparse"):
        raise StructureError(f"unknown head mode {ck.head_mode!r}")
    if len(ck.config_hash) != 32:
        raise StructureError("config hash must be exactly 32 bytes")
    sparse = ck.head_mode == "sparse"
    if sparse and (ck.selected is None or ck.assignment is None):
        raise StructureError("sparse checkpoint needs selection and assignment")
    parts = [_CKPT_FIXED.pack(CKPT_MAGIC, CKPT_VERSION, 1 if sparse else 0,
                              ck.n_layers, ck.in_dim, ck.hidden, ck.n_features,
                              ck.n_classes, ck.dropout_p, ck.bn_momentum,
                              ck.bn_eps),
             ck.config_hash]
    if sparse:
        sel = np.ascontiguousarray(ck.selected, dtype="<u4")
        asn = np.ascontiguousarray(ck.assignment, dtype=np.uint8)
        if asn.shape != (ck.n_classes, sel.size):
            raise StructureError("assignment must be [n_classes x n_selected]")
        if not np.isin(asn, (0, 1)).all():
            raise StructureError("assignment entries must be 0 or 1")
        parts.append(struct.pack("<I", sel.size))
        parts.append(sel.tobytes())
        parts.append(asn.tobytes())
    parts.append(struct.pack("<I", len(ck.arrays)))
    for name, arr in ck.arrays.items():
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    _atomic_write(path, b"".join(parts))


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _CKPT_FIXED.size + 32:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, mode, n_layers, in_dim, hidden, n_feat, n_cls, \
        dropout_p, bn_momentum, bn_eps = _CKPT_FIXED.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise MagicError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if mode not in (0, 1):
        raise StructureError(f"{path}: unknown head mode byte {mode}")
    off = _CKPT_FIXED.size
    config_hash = bytes(data[off:off + 32])
    off += 32

    def need(nbytes: int, what: str) -> int:
        if off + nbytes > len(data):
            raise TruncatedPayloadError(f"{path}: truncated at {what}")
        return nbytes

    selected = assignment = None
    if mode == 1:
        need(4, "selection count")
        (nf_star,) = struct.unpack_from("<I", data, off)
        off += 4
        need(4 * nf_star, "selected indices")
        selected = np.frombuffer(data, dtype="<u4", count=nf_star,
                                 offset=off).copy()
        off += 4 * nf_star
        need(n_cls * nf_star, "assignment matrix")
        assignment = np.frombuffer(data, dtype=np.uint8, count=n_cls * nf_star,
                                   offset=off).reshape(n_cls, nf_star).copy()
        off += n_cls * nf_star
    need(4, "array count")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(2, "array name length")
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        need(nlen, "array name")
        name = data[off:off + nlen].decode()
        off += nlen
        need(1, "array ndim")
        ndim = data[off]
        off += 1
        need(4 * ndim, "array shape")
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        numel = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        need(4 * numel, f"array '{name}' payload")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=numel,
                                     offset=off).reshape(shape).copy()
        off += 4 * numel
    if off != len(data):
        raise StructureError(f"{path}: {len(data) - off} trailing bytes")
    return Checkpoint("sparse" if mode else "dense", n_layers, in_dim, hidden,
                      n_feat, n_cls, dropout_p, bn_momentum, bn_eps,
                      config_hash, selected, assignment, arrays)


def rescale_to_bytes(m: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    """Affine min-max rescale to uint8 [0, 255]; constant maps go mid-gray."""
    m = np.asarray(m, dtype=np.float64)
    lo = float(m.min())
    hi = float(m.max())
    if hi - lo <= 0.0:
        return np.full(m.shape, 128, dtype=np.uint8), lo, hi, True
    px = np.rint((m - lo) * (255.0 / (hi - lo)))
    return np.clip(px, 0, 255).astype(np.uint8), lo, hi, False


def write_pgm(path: str, img: np.ndarray) -> None:
    h, w = img.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode()
                  + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    off = 0
    while len(fields) < 4:
        while off < len(data) and data[off:off + 1].isspace():
            off += 1
        if data[off:off + 1] == b"#":
            while off < len(data) and data[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(data) and not data[off:off + 1].isspace():
            off += 1
        fields.append(data[start:off])
    if fields[0] != b"P5":
        raise MagicError(f"{path}: not a binary graymap")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise StructureError(f"{path}: unsupported maxval {maxval}")
    off += 1  # single whitespace after maxval
    if len(data) - off < w * h:
        raise TruncatedPayloadError(f"{path}: raster cut short")
    return np.frombuffer(data, dtype=np.uint8, count=w * h,
                         offset=off).reshape(h, w).copy()


def export_saliency(fmap: np.ndarray, out_dir: str, image: str, feature: int,
                    weight: float, upsample: int = 1) -> tuple[str, str]:
    """Write one feature map as {image}_{feature}.pgm plus a JSON sidecar.

    The map is min-max rescaled to [0, 255] and nearest-neighbor upsampled;
    a constant map is exported as all-128 with ``degenerate`` set in the
    sidecar. Returns (pgm_path, json_path).
    """
    if upsample < 1:
        raise ValueError("upsample factor must be >= 1")
    if fmap.ndim != 2:
        raise StructureError(f"saliency map must be 2-D, got {fmap.shape}")
    img, lo, hi, degenerate = rescale_to_bytes(fmap)
    img = np.repeat(np.repeat(img, upsample, axis=0), upsample, axis=1)
    stem = f"{image}_{feature}"
    pgm_path = os.path.join(out_dir, stem + ".pgm")
    json_path = os.path.join(out_dir, stem + ".json")
    write_pgm(pgm_path, img)
    side = {
        "feature": int(feature),
        "weight": float(weight),
        "min": lo,
        "max": hi,
        "grid": [int(fmap.shape[0]), int(fmap.shape[1])],
        "upsample": int(upsample),
        "degenerate": bool(degenerate),
    }
    _atomic_write(json_path, (json.dumps(side, sort_keys=True,
                                         separators=(",", ": "),
                                         indent=2) + "\n").encode())
    return pgm_path, json_path
