"""Extractor contract against the primary container format."""

from __future__ import annotations

import logging
import struct

import numpy as np
import pytest
from PIL import Image

from patchlens.formats import read_embeddings
from patchlens_extractor.backbones import ToyViT, get_backbone
from patchlens_extractor.data import tokenize_mask
from patchlens_extractor.extract import ExtractionSpec, extract

SIZE = 64  # 4x4 grid with the toy patch size of 16


def paint_dataset(root, n_classes=2, per_class=3, masks=True, seed=0):
    """PNG images with a bright square on dark noise; masks mark the square."""
    rng = np.random.default_rng(seed)
    mask_root = root / "masks"
    for c in range(n_classes):
        cdir = root / "data" / "train" / f"class{c}"
        cdir.mkdir(parents=True, exist_ok=True)
        mdir = mask_root / "train" / f"class{c}"
        mdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = rng.integers(0, 60, size=(SIZE, SIZE, 3), dtype=np.uint8)
            y, x = int(rng.integers(4, 28)), int(rng.integers(4, 28))
            side = 24 + 4 * c
            img[y:y + side, x:x + side] = 200
            Image.fromarray(img).save(cdir / f"img{i}.png")
            m = np.zeros((SIZE, SIZE), dtype=np.uint8)
            m[y:y + side, x:x + side] = 255
            Image.fromarray(m).save(mdir / f"img{i}.png")
    return root / "data", mask_root


def spec_for(data_root, out, mask_dir=None, backbone="toy-vit"):
    return ExtractionSpec(backbone=backbone, data_root=str(data_root),
                          split="train", out_path=str(out),
                          mask_dir=None if mask_dir is None else str(mask_dir),
                          image_size=SIZE, batch_size=4)


def test_header_and_payload_size_match_exactly(tmp_path):
    data_root, _ = paint_dataset(tmp_path, n_classes=2, per_class=1, masks=False)
    out = tmp_path / "two.emb"
    es = extract(spec_for(data_root, out))
    assert es.n == 2
    p, d = 16, 48  # toy-vit: 4x4 grid, dim 48; registers must not appear
    expected = struct.calcsize("<8sIIIIIII") + es.n * (4 + d * 4 + p * d * 4)
    assert out.stat().st_size == expected


def test_register_tokens_are_dropped():
    vit = ToyViT()
    assert vit.n_registers == 4
    imgs = np.zeros((1, 3, SIZE, SIZE), dtype=np.float32)
    cls, registers, patches = vit.embed(imgs)
    assert registers.shape == (1, 4, 48)
    assert patches.shape == (1, 16, 48)  # grid tokens only


def test_output_validates_and_labels_follow_sorted_classes(tmp_path):
    data_root, mask_root = paint_dataset(tmp_path)
    out = tmp_path / "full.emb"
    extract(spec_for(data_root, out, mask_root))
    es = read_embeddings(str(out))
    es.validate()
    assert es.n == 6
    assert es.n_classes == 2
    assert es.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert es.cls is not None and es.masks is not None


def test_all_foreground_mask_tokenizes_to_ones(tmp_path):
    data_root, mask_root = paint_dataset(tmp_path, n_classes=1, per_class=1)
    white = np.full((SIZE, SIZE), 255, dtype=np.uint8)
    Image.fromarray(white).save(mask_root / "train" / "class0" / "img0.png")
    out = tmp_path / "white.emb"
    extract(spec_for(data_root, out, mask_root))
    es = read_embeddings(str(out))
    assert int(es.masks.sum()) == es.p


def test_tokenize_majority_vote_threshold():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[0:16, 0:8] = 1   # exactly 50% of the first 16x16 block -> 1
    mask[0:16, 16:23] = 1  # 7/16 columns of the second block -> 0
    tok = tokenize_mask(mask, 4)
    assert tok[0] == 1 and tok[1] == 0
    assert tok.sum() == 1


def test_token_fraction_tracks_pixel_fraction(tmp_path):
    data_root, mask_root = paint_dataset(tmp_path, n_classes=2, per_class=5,
                                         seed=3)
    out = tmp_path / "frac.emb"
    extract(spec_for(data_root, out, mask_root))
    es = read_embeddings(str(out))
    i = 0
    for c in range(2):
        for j in range(5):
            pix = np.asarray(Image.open(
                mask_root / "train" / f"class{c}" / f"img{j}.png")) > 127
            pixel_frac = pix.mean()
            token_frac = es.masks[i].mean()
            # within one patch row of the pixel fraction
            assert abs(token_frac - pixel_frac) <= 1.0 / es.h_f
            i += 1


def test_mismatched_mask_is_skipped_and_logged(tmp_path, caplog):
    data_root, mask_root = paint_dataset(tmp_path, n_classes=2, per_class=2)
    small = np.full((32, 32), 255, dtype=np.uint8)
    Image.fromarray(small).save(mask_root / "train" / "class0" / "img1.png")
    out = tmp_path / "skip.emb"
    with caplog.at_level(logging.WARNING, logger="patchlens_extractor"):
        es = extract(spec_for(data_root, out, mask_root))
    assert es.n == 3
    assert any("does not match image size" in r.message for r in caplog.records)


def test_reextraction_is_byte_identical(tmp_path):
    data_root, mask_root = paint_dataset(tmp_path)
    a, b = tmp_path / "a.emb", tmp_path / "b.emb"
    extract(spec_for(data_root, a, mask_root))
    extract(spec_for(data_root, b, mask_root))
    assert a.read_bytes() == b.read_bytes()


def test_unknown_backbone_is_rejected():
    with pytest.raises(ValueError, match="unknown backbone"):
        get_backbone("resnet50")


def test_acceptance_ten_image_contract(tmp_path):
    """The secondary gate: 10 masked images -> valid container, no
    register tokens in the payload, token fraction within 10%."""
    data_root, mask_root = paint_dataset(tmp_path, n_classes=2, per_class=5,
                                         seed=11)
    out = tmp_path / "gate.emb"
    extract(spec_for(data_root, out, mask_root))
    es = read_embeddings(str(out))
    es.validate()
    assert es.n == 10
    p, d = 16, 48
    expected = struct.calcsize("<8sIIIIIII") + es.n * (
        4 + p + d * 4 + p * d * 4)
    assert out.stat().st_size == expected  # no room for register tokens
    i = 0
    deviations = []
    for c in range(2):
        for j in range(5):
            pix = np.asarray(Image.open(
                mask_root / "train" / f"class{c}" / f"img{j}.png")) > 127
            deviations.append(abs(es.masks[i].mean() - pix.mean()))
            i += 1
    assert max(deviations) < 0.10
    print(f"[PASS] extractor contract: n=10, payload exact, "
          f"max mask deviation {max(deviations):.4f}")
