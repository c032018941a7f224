"""Discrete feature selection and per-class assignment after dense training.

From the trained dense model we compute three statistics over the
training set: class/feature correlation, pairwise feature similarity, and
a per-feature locality score. Selection then maximizes

    sum_{c,d} W_cd corr[c,d] + lambda_bias * sum_d s_d b_d
        - lambda_sim * sum_{d<d'} s_d s_d' sim[d,d']

subject to exactly N_f* selected features and exactly N_f^c assigned
features per class. Given a selection s the assignment decouples: each
class takes its top-N_f^c selected features by correlation, so solvers
only search over s. An exhaustive solver covers small N_f; a greedy plus
pairwise-swap heuristic covers the rest.
"""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .formats import EmbeddingSet, StructureError
from .model import AdapterModel

EXACT_MAX_FEATURES = 14


@dataclass
class SelectionProblem:
    corr: np.ndarray  # [N_c x N_f]
    sim: np.ndarray  # [N_f x N_f], symmetric, unit diagonal
    bias: np.ndarray  # [N_f] in [0, 1]
    nf_star: int
    nf_class: int
    lambda_sim: float = 0.5
    lambda_bias: float = 0.1

    @property
    def n_classes(self) -> int:
        return self.corr.shape[0]

    @property
    def n_features(self) -> int:
        return self.corr.shape[1]

    def validate(self) -> None:
        n_c, n_f = self.corr.shape
        if self.sim.shape != (n_f, n_f) or self.bias.shape != (n_f,):
            raise ValueError("statistic shapes disagree")
        if not np.allclose(self.sim, self.sim.T, atol=1e-6):
            raise ValueError("similarity must be symmetric")
        if not np.allclose(np.diag(self.sim), 1.0, atol=1e-6):
            raise ValueError("similarity diagonal must be 1")
        if not 1 <= self.nf_class <= self.nf_star <= n_f:
            raise ValueError("need 1 <= per-class count <= selected <= total")
        if min(self.lambda_sim, self.lambda_bias) < 0:
            raise ValueError("objective weights must be >= 0")


@dataclass
class SelectionResult:
    s: np.ndarray  # {0,1}^{N_f}
    w_sparse: np.ndarray  # {0,1}^{N_c x N_f*}, columns follow selected order
    objective: float
    solver: str

    @property
    def selected(self) -> np.ndarray:
        """Selected feature ids, ascending; w_sparse columns use this order."""
        return np.flatnonzero(self.s).astype(np.uint32)

    def validate(self, nf_star: int, nf_class: int) -> None:
        if not np.isin(self.s, (0, 1)).all():
            raise StructureError("selection vector must be 0/1")
        if int(self.s.sum()) != nf_star:
            raise StructureError(
                f"selection must pick exactly {nf_star} features")
        if self.w_sparse.shape[1] != nf_star:
            raise StructureError("assignment width must match selection size")
        if not np.isin(self.w_sparse, (0, 1)).all():
            raise StructureError("assignment must be 0/1")
        if not (self.w_sparse.sum(axis=1) == nf_class).all():
            raise StructureError(
                f"every class must use exactly {nf_class} features")

    def to_json(self) -> str:
        sel = self.selected
        per_class = [sorted(int(sel[p]) for p in np.flatnonzero(row))
                     for row in self.w_sparse]
        return json.dumps({
            "s": self.s.astype(int).tolist(),
            "assignments": per_class,
            "objective": self.objective,
            "solver": self.solver,
        }, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        obj = json.loads(text)
        s = np.asarray(obj["s"], dtype=np.uint8)
        sel = np.flatnonzero(s)
        pos = {int(d): i for i, d in enumerate(sel)}
        w = np.zeros((len(obj["assignments"]), sel.size), dtype=np.uint8)
        for c, feats in enumerate(obj["assignments"]):
            for d in feats:
                w[c, pos[int(d)]] = 1
        return cls(s, w, float(obj["objective"]), obj["solver"])


# ---- statistics ------------------------------------------------------------


def _pooled_activations(model: AdapterModel, data: EmbeddingSet,
                        batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Feature vectors [N x N_f] and mean spatially-softmaxed maps [N_f x P]."""
    acts = np.zeros((data.n, model.n_features), dtype=np.float64)
    qsum = np.zeros((model.n_features, data.p), dtype=np.float64)
    for start in range(0, data.n, batch_size):
        out = model.forward_batch(data.patches[start:start + batch_size],
                                  train=False)
        F = out["F"].astype(np.float64)  # [b x P x N_f]
        acts[start:start + F.shape[0]] = out["f"]
        z = F - F.max(axis=1, keepdims=True)
        e = np.exp(z)
        q = e / e.sum(axis=1, keepdims=True)
        qsum += q.sum(axis=0).T
    return acts, qsum / data.n


def build_problem(model: AdapterModel, data: EmbeddingSet, nf_star: int,
                  nf_class: int, lambda_sim: float = 0.5,
                  lambda_bias: float = 0.1) -> SelectionProblem:
    """Correlation, similarity, and locality statistics from the dense model.

    corr[c,d] is the Pearson correlation between feature d's pooled
    activation and the one-hot indicator of class c over the training
    set; zero-variance features give 0. sim is the Pearson correlation
    between activation vectors (centering makes identical features 1 and
    negated copies -1). bias is the negentropy of the dataset-average
    spatially-softmaxed map, rescaled so a one-hot map scores 1 and a
    uniform map 0.
    """
    if model.head_mode != "dense":
        raise ValueError("selection statistics require the dense-trained model")
    data.validate()
    counts = np.bincount(np.asarray(data.labels, dtype=np.int64),
                         minlength=data.n_classes)
    if counts.min() < 2:
        short = int(np.argmin(counts))
        raise ValueError(
            f"class {short} has {counts.min()} samples; need at least 2")
    acts, qbar = _pooled_activations(model, data)
    n, n_f = acts.shape
    n_c = data.n_classes

    a_c = acts - acts.mean(axis=0)
    a_norm = np.sqrt((a_c ** 2).sum(axis=0))
    onehot = np.zeros((n, n_c), dtype=np.float64)
    onehot[np.arange(n), np.asarray(data.labels, dtype=np.int64)] = 1.0
    y_c = onehot - onehot.mean(axis=0)
    y_norm = np.sqrt((y_c ** 2).sum(axis=0))
    denom = np.outer(y_norm, a_norm)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (y_c.T @ a_c) / denom
    corr[~np.isfinite(corr)] = 0.0

    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (a_c.T @ a_c) / np.outer(a_norm, a_norm)
    sim[~np.isfinite(sim)] = 0.0
    np.fill_diagonal(sim, 1.0)

    p = data.p
    if p > 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(qbar > 0, qbar * np.log(qbar), 0.0)
        entropy = -plogp.sum(axis=1)
        bias = 1.0 - entropy / np.log(p)
        bias = np.clip(bias, 0.0, 1.0)
    else:
        bias = np.zeros(n_f)  # a single-cell grid carries no locality signal

    problem = SelectionProblem(corr, sim, bias, nf_star, nf_class,
                               lambda_sim, lambda_bias)
    problem.validate()
    return problem


# ---- objective -------------------------------------------------------------


def _assign(problem: SelectionProblem, sel: np.ndarray
            ) -> tuple[np.ndarray, float]:
    """Per-class top-k assignment over a selection; ties pick lower ids."""
    k = min(problem.nf_class, sel.size)
    corr_sel = problem.corr[:, sel]
    w = np.zeros((problem.n_classes, sel.size), dtype=np.uint8)
    total = 0.0
    for c in range(problem.n_classes):
        # lexsort: primary key -corr, secondary the (ascending) position,
        # which maps to ascending feature id since sel is sorted
        order = np.lexsort((np.arange(sel.size), -corr_sel[c]))
        pick = order[:k]
        w[c, pick] = 1
        total += float(corr_sel[c, pick].sum())
    return w, total


def objective_of(problem: SelectionProblem, sel: np.ndarray
                 ) -> tuple[float, np.ndarray]:
    """Objective value and induced assignment for a sorted selection."""
    w, corr_part = _assign(problem, sel)
    bias_part = problem.lambda_bias * float(problem.bias[sel].sum())
    sub = problem.sim[np.ix_(sel, sel)]
    pair_sum = float((sub.sum() - np.trace(sub)) / 2.0)
    return corr_part + bias_part - problem.lambda_sim * pair_sum, w


# ---- solvers ---------------------------------------------------------------


def solve_exact(problem: SelectionProblem) -> SelectionResult:
    """Global maximizer by enumerating every C(N_f, N_f*) selection.

    Iteration order is ascending index tuples, and only strict
    improvements replace the incumbent, so ties resolve to the smallest
    selected-index tuple; per-class ties resolve to lower feature ids
    inside the assignment.
    """
    problem.validate()
    n_f = problem.n_features
    if n_f > EXACT_MAX_FEATURES:
        raise ValueError(
            f"exhaustive search supports at most {EXACT_MAX_FEATURES} "
            f"features (got {n_f}); use solve_heuristic")
    best_val = -np.inf
    best_sel = None
    best_w = None
    for combo in itertools.combinations(range(n_f), problem.nf_star):
        sel = np.array(combo)
        val, w = objective_of(problem, sel)
        if val > best_val:
            best_val, best_sel, best_w = val, sel, w
    s = np.zeros(n_f, dtype=np.uint8)
    s[best_sel] = 1
    result = SelectionResult(s, best_w, best_val, "exact")
    result.validate(problem.nf_star, problem.nf_class)
    return result


def solve_heuristic(problem: SelectionProblem,
                    budget: int = 10000) -> SelectionResult:
    """Greedy construction plus best-improvement pairwise swap passes.

    Each sweep scores every (selected, unselected) exchange and applies
    the single best one. ``budget`` caps the number of swap-candidate
    objective evaluations; 0 returns the pure greedy solution. The
    result is always feasible and never worse than greedy.
    """
    problem.validate()
    if budget < 0:
        raise ValueError("budget must be >= 0")
    n_f = problem.n_features
    chosen: list[int] = []
    remaining = list(range(n_f))
    for _ in range(problem.nf_star):
        best_val = -np.inf
        best_d = None
        for d in remaining:
            sel = np.array(sorted(chosen + [d]))
            val, _ = objective_of(problem, sel)
            if val > best_val:
                best_val, best_d = val, d
        chosen.append(best_d)
        remaining.remove(best_d)
    sel = np.array(sorted(chosen))
    cur_val, cur_w = objective_of(problem, sel)

    # best-improvement passes: apply the single best swap per sweep
    evals = 0
    while evals < budget:
        inside = sel.tolist()
        outside = [d for d in range(n_f) if d not in set(inside)]
        best_val = cur_val + 1e-12
        best = None
        for a in inside:
            for b in outside:
                if evals >= budget:
                    break
                cand = np.array(sorted(set(inside) - {a} | {b}))
                val, w = objective_of(problem, cand)
                evals += 1
                if val > best_val:
                    best_val, best = val, (cand, w)
            if evals >= budget:
                break
        if best is None:
            break
        sel, cur_w = best
        cur_val = best_val

    s = np.zeros(n_f, dtype=np.uint8)
    s[sel] = 1
    result = SelectionResult(s, cur_w, cur_val, "heuristic")
    result.validate(problem.nf_star, problem.nf_class)
    return result


def apply_selection(model: AdapterModel,
                    result: SelectionResult) -> AdapterModel:
    """Copy the dense model and replace its head with the frozen selection."""
    if model.head_mode != "dense":
        raise ValueError("selection applies to a dense model")
    if result.s.shape != (model.n_features,):
        raise StructureError("selection length must match feature count")
    nf_star = int(result.s.sum())
    if result.w_sparse.shape != (model.n_classes, nf_star):
        raise StructureError("assignment shape must match classes x selection")
    sparse = copy.deepcopy(model)
    sparse.set_sparse_head(result.selected, result.w_sparse)
    return sparse
