"""Interpretability metric suite over a trained adapter.

Every metric is a pure function of arrays; dataset-level values are means
over images accumulated in float64 with a fixed iteration order, so a
report is byte-reproducible. Degenerate inputs never raise mid-suite:
each metric counts and reports the images or features it had to skip.
"""

from __future__ import annotations

import json

import numpy as np
from scipy import integrate

from .formats import EmbeddingSet
from .model import AdapterModel
from .rng import stream


def dilate(mask: np.ndarray) -> np.ndarray:
    """Binary dilation with the all-ones 3x3 element; borders clip."""
    from scipy import ndimage
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {m.shape}")
    out = ndimage.binary_dilation(m.astype(bool), structure=np.ones((3, 3)))
    return out.astype(np.uint8)


def plausibility(F: np.ndarray, w_row: np.ndarray, mask: np.ndarray,
                 rectify: bool = True) -> float | None:
    """Share of the weighted class map inside the dilated object mask.

    F is [P x N_f] in row-major grid order, mask is [H x W] with
    H * W = P. The class map sum_d w_d F_d is rectified at 0 (negative
    evidence does not count against localisation); an image whose
    rectified map sums to 0 returns None so callers can skip and count it.
    """
    h, w = mask.shape
    if h * w != F.shape[0]:
        raise ValueError(f"mask {mask.shape} does not cover {F.shape[0]} patches")
    fmap = F.astype(np.float64) @ w_row.astype(np.float64)
    if rectify:
        fmap = np.maximum(fmap, 0.0)
    denom = fmap.sum()
    if denom == 0.0:
        # rectified maps are non-negative, so this is the only degenerate case
        return None
    mdil = dilate(mask).reshape(-1).astype(np.float64)
    return float((fmap * mdil).sum() / denom)


def patch_contextualisation(patches: np.ndarray,
                            cls: np.ndarray) -> float | None:
    """Cosine of the mean patch embedding with the CLS embedding.

    Returns None when either vector is zero (undefined, reported missing).
    """
    mean_patch = patches.astype(np.float64).mean(axis=0)
    c = cls.astype(np.float64)
    np_norm = float(np.sqrt((mean_patch ** 2).sum()))
    c_norm = float(np.sqrt((c ** 2).sum()))
    if np_norm == 0.0 or c_norm == 0.0:
        return None
    return float(np.dot(mean_patch, c) / (np_norm * c_norm))


def sid_at_k(F: np.ndarray, w_row: np.ndarray, k: int) -> float:
    """Spatial distinctiveness of the k most strongly weighted features.

    Each map is divided by its absolute spatial mean and spatially
    softmaxed; the score is the per-cell max over those k maps, summed
    and divided by k. A zero map softmaxes to uniform. Equals 1 at k=1.
    """
    p, n_f = F.shape
    if not 1 <= k <= n_f:
        raise ValueError(f"k must lie in [1, {n_f}], got {k}")
    # ties on |weight| resolve to lower feature ids
    order = np.lexsort((np.arange(n_f), -np.abs(w_row)))
    top = order[:k]
    maps = F[:, top].astype(np.float64)
    absmean = np.abs(maps).mean(axis=0)
    normed = np.where(absmean > 0.0, maps / np.where(absmean > 0.0, absmean, 1.0),
                      0.0)
    z = normed - normed.max(axis=0, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=0, keepdims=True)
    # divide by the realised softmax mass (k up to rounding) so the k=1
    # score is exactly 1 rather than 1 +/- a few ulps
    return float(sm.max(axis=1).sum() / sm.sum())


def class_independence(acts: np.ndarray, labels: np.ndarray,
                       n_classes: int) -> tuple[float | None, int]:
    """tau = 1 - mean over features of the largest class share.

    Each feature's activations are shifted so their minimum is 0; the
    share of the total mass landing on each class gives phi[c, d].
    Features whose shifted activations are all zero carry no signal and
    are excluded; returns (tau, excluded_count), tau None if nothing
    remains.
    """
    a = acts.astype(np.float64)
    n, n_f = a.shape
    y = np.asarray(labels, dtype=np.int64)
    shifted = a - a.min(axis=0, keepdims=True)
    totals = shifted.sum(axis=0)
    onehot = np.zeros((n, n_classes), dtype=np.float64)
    onehot[np.arange(n), y] = 1.0
    class_mass = onehot.T @ shifted  # [N_c x N_f]
    keep = totals > 0.0
    excluded = int((~keep).sum())
    if not keep.any():
        return None, excluded
    phi = class_mass[:, keep] / totals[keep]
    tau = 1.0 - float(phi.max(axis=0).mean(dtype=np.float64))
    return tau, excluded


# ---- contrastiveness -------------------------------------------------------


def _gmm2_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """Two-component 1-D GMM by EM; returns (pi, mu, sigma) or None if the
    samples are all equal.

    Three fixed-seed restarts; a restart replaces the percentile-init fit
    only on a material likelihood gain (1e-3 per sample). Heavily
    overlapped components sit on a flat likelihood ridge where longer or
    luckier runs drift toward a floored-sigma spurious maximum with a
    marginally better likelihood but a badly biased overlap, and the
    materiality bar keeps those from outvoting the canonical fit while
    still letting genuine basin jumps (a missed minority mode) win.
    """
    x = x.astype(np.float64)
    std = float(x.std())
    if std == 0.0:
        return None
    floor = 1e-6 * std
    q25, q75 = np.percentile(x, [25.0, 75.0])
    best_ll = -np.inf
    best = None
    for restart in range(3):
        mu = np.array([q25, q75], dtype=np.float64)
        if restart > 0:
            mu = mu + stream(restart, "gmm-restart").normal(size=2) * 0.5 * std
        sigma = np.array([std / 2.0, std / 2.0])
        sigma = np.maximum(sigma, floor)
        pi = np.array([0.5, 0.5])
        prev_ll = -np.inf
        for _ in range(200):
            logp = (-0.5 * ((x[:, None] - mu[None, :]) / sigma[None, :]) ** 2
                    - np.log(sigma[None, :]) - 0.5 * np.log(2 * np.pi)
                    + np.log(np.maximum(pi[None, :], 1e-300)))
            m = logp.max(axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
            ll = float(lse.sum())
            resp = np.exp(logp - lse[:, None])
            nk = resp.sum(axis=0)
            if nk.min() > 1e-12:
                pi = nk / x.size
                mu = (resp * x[:, None]).sum(axis=0) / nk
                var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
                sigma = np.maximum(np.sqrt(var), floor)
            if abs(ll - prev_ll) < 1e-8:
                break
            prev_ll = ll
        margin = 0.0 if best is None else 1e-3 * x.size
        if ll > best_ll + margin:
            best_ll = ll
            best = (pi.copy(), mu.copy(), sigma.copy())
    return best


def _crossings(pi, mu, sigma, lo, hi) -> list[float]:
    """Real solutions of pi1 N1(x) = pi2 N2(x) inside (lo, hi)."""
    a = 0.5 / sigma[1] ** 2 - 0.5 / sigma[0] ** 2
    b = mu[0] / sigma[0] ** 2 - mu[1] / sigma[1] ** 2
    c = (0.5 * mu[1] ** 2 / sigma[1] ** 2 - 0.5 * mu[0] ** 2 / sigma[0] ** 2
         + np.log((pi[0] * sigma[1]) / (pi[1] * sigma[0])))
    if abs(a) < 1e-300:
        roots = [] if abs(b) < 1e-300 else [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            roots = []
        else:
            r = np.sqrt(disc)
            roots = [(-b - r) / (2 * a), (-b + r) / (2 * a)]
    return sorted(x for x in roots if lo < x < hi)


def gaussian_overlap(pi: np.ndarray, mu: np.ndarray,
                     sigma: np.ndarray) -> float:
    """Normalized overlap of two weighted Gaussians in [0, 1].

    Integrates min(pi1 N1, pi2 N2) over mu +- 8 sigma (adaptive
    quadrature split at the density crossings) and divides by
    min(pi1, pi2) so identical components score exactly 1.
    """
    pmin = float(min(pi[0], pi[1]))
    if pmin < 1e-12:
        return 1.0  # one component vanished: nothing to contrast
    lo = float(min(mu[0] - 8 * sigma[0], mu[1] - 8 * sigma[1]))
    hi = float(max(mu[0] + 8 * sigma[0], mu[1] + 8 * sigma[1]))

    def integrand(x):
        n1 = pi[0] / (sigma[0] * np.sqrt(2 * np.pi)) \
            * np.exp(-0.5 * ((x - mu[0]) / sigma[0]) ** 2)
        n2 = pi[1] / (sigma[1] * np.sqrt(2 * np.pi)) \
            * np.exp(-0.5 * ((x - mu[1]) / sigma[1]) ** 2)
        return np.minimum(n1, n2)

    pts = _crossings(pi, mu, sigma, lo, hi)
    val, _ = integrate.quad(integrand, lo, hi, points=pts or None, limit=200)
    return float(np.clip(val / pmin, 0.0, 1.0))


def feature_overlap(values: np.ndarray) -> float:
    """Overlap of the fitted 2-component GMM for one feature's samples.

    All-equal samples cannot be split into two modes: overlap 1.
    """
    if values.size < 4:
        raise ValueError("need at least 4 samples per feature")
    fit = _gmm2_fit(values)
    if fit is None:
        return 1.0
    return gaussian_overlap(*fit)


def contrastiveness(acts: np.ndarray) -> tuple[float, list[float], int]:
    """1 - mean per-feature overlap; returns (value, overlaps, degenerate)."""
    n, n_f = acts.shape
    overlaps = []
    degenerate = 0
    for d in range(n_f):
        col = acts[:, d]
        if float(col.std()) == 0.0:
            degenerate += 1
            overlaps.append(1.0)
        else:
            overlaps.append(feature_overlap(col))
    value = 1.0 - float(np.mean(overlaps, dtype=np.float64))
    return value, overlaps, degenerate


# ---- full suite ------------------------------------------------------------


def evaluate(model: AdapterModel, data: EmbeddingSet, k: int = 5,
             rectify: bool = True, batch_size: int = 256) -> dict:
    """Run the complete metric suite over a dataset.

    Sparse models are scored in their selected feature subspace with the
    binary class rows; dense models use all features and signed weights.
    Metrics whose inputs are absent (masks, CLS embeddings) are reported
    as null with a reason. The result is a plain dict ready for
    ``report_to_json``.
    """
    data.validate()
    if data.n == 0:
        raise ValueError("empty dataset")
    sparse = model.head_mode == "sparse"
    n_feat_space = int(model.selected.size) if sparse else model.n_features
    k_eff = min(k, n_feat_space)

    correct = 0
    plaus_sum = 0.0
    plaus_n = 0
    plaus_skipped = 0
    ctx_sum = 0.0
    ctx_n = 0
    ctx_missing = 0
    sid_sum = 0.0
    acts = np.zeros((data.n, n_feat_space), dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)

    for start in range(0, data.n, batch_size):
        xb = data.patches[start:start + batch_size]
        out = model.forward_batch(xb, train=False)
        logits = out["logits"]
        preds = np.argmax(logits, axis=1)
        correct += int((preds == y[start:start + xb.shape[0]]).sum())
        for j in range(xb.shape[0]):
            i = start + j
            if sparse:
                F_i = out["F"][j][:, model.selected]
                w_row = model.w_sparse[preds[j]]
                acts[i] = out["f"][j][model.selected]
            else:
                F_i = out["F"][j]
                w_row = model.w_dense[preds[j]]
                acts[i] = out["f"][j]
            sid_sum += sid_at_k(F_i, w_row, k_eff)
            if data.masks is not None:
                mask = data.masks[i].reshape(data.h_f, data.w_f)
                val = plausibility(F_i, w_row, mask, rectify=rectify)
                if val is None:
                    plaus_skipped += 1
                else:
                    plaus_sum += val
                    plaus_n += 1
            if data.cls is not None:
                val = patch_contextualisation(xb[j], data.cls[i])
                if val is None:
                    ctx_missing += 1
                else:
                    ctx_sum += val
                    ctx_n += 1

    tau, tau_excluded = class_independence(acts, y, data.n_classes)
    if data.n >= 4:
        contrast, _, contrast_degen = contrastiveness(acts)
        contrast_reason = None
    else:
        contrast, contrast_degen = None, 0
        contrast_reason = "needs at least 4 samples"

    report = {
        "n_images": int(data.n),
        "feature_space": "sparse" if sparse else "dense",
        "accuracy": correct / data.n,
        "plausibility": None if data.masks is None or plaus_n == 0
        else plaus_sum / plaus_n,
        "plausibility_skipped": plaus_skipped,
        "plausibility_reason": None if data.masks is not None
        else "dataset has no masks",
        "patch_contextualisation": None if data.cls is None or ctx_n == 0
        else ctx_sum / ctx_n,
        "patch_contextualisation_missing": ctx_missing,
        "patch_contextualisation_reason": None if data.cls is not None
        else "dataset has no CLS embeddings",
        "sid_at_k": sid_sum / data.n,
        "sid_k": int(k_eff),
        "class_independence": tau,
        "class_independence_excluded": tau_excluded,
        "contrastiveness": contrast,
        "contrastiveness_degenerate": contrast_degen,
        "contrastiveness_reason": contrast_reason,
    }
    return report


_PERCENT_KEYS = ("accuracy", "plausibility", "patch_contextualisation",
                 "sid_at_k", "class_independence", "contrastiveness")


def report_to_json(report: dict) -> str:
    """Serialize a report with headline values in percent (2 decimals)
    alongside the raw fractions; byte-stable for identical inputs."""
    out = dict(report)
    percent = {}
    for key in _PERCENT_KEYS:
        val = report.get(key)
        percent[key] = None if val is None else f"{100.0 * val:.2f}"
    out["percent"] = percent
    return json.dumps(out, sort_keys=True, indent=2) + "\n"
