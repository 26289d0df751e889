"""End-to-end acceptance gate.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line (collected again in
the terminal summary) and asserts the criterion at its stated tolerance,
including the runtime budget.
"""

import math
import time
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from scipy.special import gammaln

from fedpn.cli import main
from fedpn.config import load_config
from fedpn.data import gen_blobs, gen_toy_three_clusters, partition_heterogeneous
from fedpn.dirichlet import (
    LossWeights,
    aleatoric_expected_entropy,
    epistemic_entropy,
    loss_decomposition_check,
)
from fedpn.experiments import (
    run_label_noise_experiment,
    run_precision_filter_experiment,
    run_switching_benchmark,
    run_toy_loss_experiment,
)
from fedpn.federated import (
    ClientState,
    FederationConfig,
    aggregate_mean,
    batch_loss,
    local_personalization_stage,
    run_federated_training,
    train_steps,
)
from fedpn.inference import calibrate_threshold, is_uncertain
from fedpn.models import Architecture, ParameterBundle, PosteriorNetwork
from fedpn.numerics import autodiff as ad
from fedpn.numerics.optim import adam
from fedpn.numerics.special import digamma, lgamma


def _check(report, criterion, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    report(criterion, ok and in_time, f"{detail}; {elapsed:.1f}s (budget {budget:g}s)")
    assert ok, detail
    assert in_time, f"runtime {elapsed:.1f}s exceeds {budget}s"


# 1 -----------------------------------------------------------------------------


def test_acceptance_01_special_functions(report):
    xs = np.geomspace(1e-3, 1e6, 1000)
    mpmath.mp.dps = 30
    ref_lg = np.array([float(mpmath.loggamma(mpmath.mpf(float(x)))) for x in xs])
    ref_dg = np.array([float(mpmath.digamma(mpmath.mpf(float(x)))) for x in xs])
    t0 = time.perf_counter()
    lg, dg = lgamma(xs), digamma(xs)
    err_lg = np.max(np.abs(lg - ref_lg))
    err_dg = np.max(np.abs(dg - ref_dg))
    lower = np.all(np.log(xs) - 1.0 / xs <= dg)
    upper = np.all(dg <= np.log(xs) - 0.5 / xs)
    elapsed = time.perf_counter() - t0
    ok = err_lg <= 1e-10 and err_dg <= 1e-10 and lower and upper
    _check(report, 1, ok, f"max|lgamma err| {err_lg:.2e}, max|digamma err| {err_dg:.2e}, "
                          f"bound lower={lower} upper={upper}", elapsed, 1.0)


# 2 -----------------------------------------------------------------------------


def _mc_dirichlet(alpha, n, rng):
    mu = rng.dirichlet(alpha, size=n)
    log_mu = np.log(np.clip(mu, 1e-300, None))
    log_pdf = gammaln(alpha.sum()) - gammaln(alpha).sum() + log_mu @ (alpha - 1.0)
    cat_h = -np.sum(mu * log_mu, axis=1)
    se = lambda v: v.std(ddof=1) / math.sqrt(n)
    return (-log_pdf.mean(), se(log_pdf)), (cat_h.mean(), se(cat_h))


def test_acceptance_02_dirichlet_formulas(report):
    t0 = time.perf_counter()
    worst = 0.0
    # one independent stream per concentration vector
    for i, child in enumerate(np.random.SeedSequence(2024).spawn(20)):
        rng = np.random.default_rng(child)
        alpha = rng.uniform(0.5, 8.0, size=(2, 3, 5)[i % 3])
        (h_mc, h_se), (e_mc, e_se) = _mc_dirichlet(alpha, 1_000_000, rng)
        worst = max(worst, abs(epistemic_entropy(alpha) - h_mc) / h_se,
                    abs(aleatoric_expected_entropy(alpha) - e_mc) / e_se)
    anchor_h = abs(epistemic_entropy(np.ones(2)))
    anchor_e = abs(aleatoric_expected_entropy(np.ones(2)) - 0.5)
    elapsed = time.perf_counter() - t0
    ok = worst <= 3.0 and anchor_h <= 1e-9 and anchor_e <= 1e-9
    _check(report, 2, ok, f"worst MC deviation {worst:.2f} SE over 40 checks, "
                          f"anchors {anchor_h:.1e}/{anchor_e:.1e}", elapsed, 30.0)


# 3 -----------------------------------------------------------------------------


def _frozen_density_loss(model, params, x, y, weights, ld_frozen):
    """fedpn loss with the UCE density held at ``ld_frozen`` (the stop-gradient
    semantics), evaluated by plain forward passes."""
    m = PosteriorNetwork(model.arch, params, model.class_prior)
    _, ld, probs = m.evaluate(x)
    alpha = 1.0 + np.exp(ld_frozen + model.arch.log_budget)[:, None] * probs
    a0 = alpha.sum(axis=1)
    uce = digamma(a0) - digamma(alpha[np.arange(len(y)), y])
    return (uce.mean() - weights.log_prob * ld.mean()
            - weights.entropy * epistemic_entropy(alpha).mean())


def test_acceptance_03_gradients(report):
    t0 = time.perf_counter()
    arch = Architecture(3, 3, embed_dim=2, hidden=(4, 4), flow_depth=2, log_budget=1.0)
    model = PosteriorNetwork.create(arch, 3)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, size=8)
    weights = LossWeights(entropy=0.05, log_prob=0.001)

    g = ad.Graph()
    grads = ad.backward(g, batch_loss(model, model.bind(g, ("encoder", "flow", "head")), x, y,
                                      "fedpn", weights))
    ld0 = model.evaluate(x)[1]
    worst = 0.0
    eps = 1e-6
    for name, value in model.params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            up = {k: v.copy() for k, v in model.params.items()}
            dn = {k: v.copy() for k, v in model.params.items()}
            up[name][idx] += eps
            dn[name][idx] -= eps
            fd[idx] = (_frozen_density_loss(model, up, x, y, weights, ld0)
                       - _frozen_density_loss(model, dn, x, y, weights, ld0)) / (2 * eps)
        rel = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)

    g = ad.Graph()
    uce_only = ad.backward(g, batch_loss(model, model.bind(g, ("flow",)), x, y, "fedpn",
                                         LossWeights(0.0, 0.0)))
    g = ad.Graph()
    P = model.bind(g, ("flow",))
    nll = ad.backward(g, -0.001 * ad.mean(model.log_density(P, model.encoder.forward(P, g.constant(x)))))
    flow_names = [n for n in model.params if n.startswith("flow.")]
    uce_zero = all(np.array_equal(uce_only[n], np.zeros_like(uce_only[n])) for n in flow_names)
    nll_nonzero = all(np.any(nll[n] != 0.0) for n in flow_names)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and uce_zero and nll_nonzero
    _check(report, 3, ok, f"max rel. FD error {worst:.2e}, UCE flow grad exactly 0: {uce_zero}, "
                          f"log-p flow grad nonzero: {nll_nonzero}", elapsed, 10.0)


# 4 -----------------------------------------------------------------------------


def test_acceptance_04_density_normalisation(report):
    t0 = time.perf_counter()
    ds = gen_toy_three_clusters(200, 3, seed=4)
    arch = Architecture(2, 3, embed_dim=2, identity_encoder=True, flow_depth=6)
    model = PosteriorNetwork.create(arch, 4, ds.class_proportions())
    train_steps(model, ds.inputs, ds.labels, 400, adam(0.01), np.random.default_rng(4), 64,
                "fedpn", LossWeights(0.0, 0.001), trainable=("flow", "head"))
    grid = np.linspace(-6.0, 6.0, 601)
    xx, yy = np.meshgrid(grid, grid)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    ld = np.concatenate([model.evaluate(z=chunk)[1] for chunk in np.array_split(pts, 20)])
    mass = float(np.exp(ld).sum() * (grid[1] - grid[0]) ** 2)
    elapsed = time.perf_counter() - t0
    _check(report, 4, abs(mass - 1.0) <= 0.02, f"grid mass {mass:.4f}", elapsed, 30.0)


# 5 -----------------------------------------------------------------------------


def _spearman_exact(xs, ys):
    """Rank correlation as an exact rational (no ties): 1 - 6 sum d^2 / (n (n^2 - 1))."""
    assert len(set(xs)) == len(xs) and len(set(ys)) == len(ys)
    rx = np.argsort(np.argsort(xs))
    ry = np.argsort(np.argsort(ys))
    n = len(xs)
    return 1 - Fraction(6 * int(np.sum((rx - ry) ** 2)), n * (n * n - 1))


def test_acceptance_05_toy_loss_pathology(report):
    t0 = time.perf_counter()
    cfg = load_config(experiment="toy-loss", environ={})
    summary, _ = run_toy_loss_experiment(cfg)
    elapsed = time.perf_counter() - t0
    ks = list(cfg.experiments.toy_loss.ks)
    med = {loss: [summary.where(loss=loss, K=k)[0]["median_logp_center"] for k in ks]
           for loss in ("uce-bayesian", "fedpn")}
    rho = _spearman_exact(ks, med["uce-bayesian"])
    spread = max(med["fedpn"]) - min(med["fedpn"])
    ok = rho <= Fraction(-4, 5) and spread <= 1.0
    fmt = lambda v: "[" + ", ".join(f"{x:.2f}" for x in v) + "]"
    _check(report, 5, ok, f"UCE medians {fmt(med['uce-bayesian'])} Spearman {float(rho):.2f}; "
                          f"fedpn medians {fmt(med['fedpn'])} range {spread:.2f} nat",
           elapsed, 600.0)


# 6 -----------------------------------------------------------------------------


def test_acceptance_06_sign_flip(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    bad = []
    for i in range(100):
        k = int(rng.integers(2, 21))
        p = float(10 ** rng.uniform(-2, 3))
        side = i % 3
        f = (1.0 / k if side == 0 else
             rng.uniform(0.0, 0.99 / k) if side == 1 else rng.uniform(1.01 / k, 1.0))
        h = 1e-6 * p
        d = (loss_decomposition_check(p + h, f, k)[1] - loss_decomposition_check(p - h, f, k)[1]) / (2 * h)
        ok = abs(d) <= 1e-8 if side == 0 else (d > 0 if side == 1 else d < 0)
        if not ok:
            bad.append((k, p, f, d))
    elapsed = time.perf_counter() - t0
    _check(report, 6, not bad, f"{100 - len(bad)}/100 triples with the expected sign", elapsed, 1.0)


# 7 -----------------------------------------------------------------------------


def test_acceptance_07_switching_benchmark(report):
    t0 = time.perf_counter()
    cfg = load_config(experiment="switching", environ={})
    res = run_switching_benchmark(cfg)
    elapsed = time.perf_counter() - t0
    acc = {(m, s): 100 * res.mean(m, s) for m in ("local", "global", "switch")
           for s in ("InD", "OOD", "Mix")}
    striped = all(fam["global"].rows_identical() for fam in res.matrices.values())
    contrast = []
    for seed, fam in res.matrices.items():
        vals = fam["local"].values
        own = np.zeros(vals.shape, dtype=bool)
        for i, classes in enumerate(res.client_classes[seed]):
            own[i, list(classes)] = True
        contrast.append((np.nanmean(vals[own]), np.nanmean(vals[~own])))
    present_hi = min(c[0] for c in contrast)
    absent_lo = max(c[1] for c in contrast)
    ok = (acc["local", "OOD"] <= 5 and acc["local", "InD"] >= 95
          and acc["switch", "Mix"] >= acc["local", "Mix"] + 20
          and acc["switch", "Mix"] >= acc["global", "Mix"] - 2
          and striped and present_hi >= 0.95 and absent_lo <= 0.05)
    detail = " ".join(f"{m}/{s}={acc[m, s]:.1f}" for m in ("local", "global", "switch")
                      for s in ("InD", "OOD", "Mix"))
    _check(report, 7, ok, f"{detail}; global rows identical {striped}; local own-class "
                          f"acc >= {present_hi:.3f}, other-class acc <= {absent_lo:.3f}",
           elapsed, 900.0)


# 8 -----------------------------------------------------------------------------


def test_acceptance_08_label_noise(report):
    t0 = time.perf_counter()
    cfg = load_config(experiment="label-noise", environ={})
    _, s = run_label_noise_experiment(cfg)
    elapsed = time.perf_counter() - t0
    ratio = s["aleatoric_noisy_mean"] / s["aleatoric_clean_mean"]
    gap = abs(s["epistemic_noisy_mean"] - s["epistemic_clean_mean"]) / s["epistemic_pooled_std"]
    ok = ratio >= 2.0 and gap <= 0.5
    _check(report, 8, ok, f"aleatoric noisy/clean {s['aleatoric_noisy_mean']:.3f}/"
                          f"{s['aleatoric_clean_mean']:.3f} = {ratio:.1f}x; epistemic gap "
                          f"{gap:.2f} pooled std", elapsed, 600.0)


# 9 -----------------------------------------------------------------------------


def test_acceptance_09_precision_filter(report):
    t0 = time.perf_counter()
    cfg = load_config(experiment="precision-filter", environ={})
    table = run_precision_filter_experiment(cfg)
    elapsed = time.perf_counter() - t0
    p0 = table.where(fraction=0.0)[0]["precision"]
    p5 = table.where(fraction=0.5)[0]["precision"]
    gain = 100 * (p5 - p0)
    _check(report, 9, gain >= 10, f"precision {100 * p0:.1f} -> {100 * p5:.1f} "
                                  f"(+{gain:.1f} points)", elapsed, 300.0)


# 10 ----------------------------------------------------------------------------


def test_acceptance_10_federation_mechanics(report, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    manifest = {"head": [["head.b", [7]]]}
    mean_err = 0.0
    for trial in range(20):
        rows = rng.normal(scale=10.0 ** rng.integers(-3, 2), size=(int(rng.integers(1, 30)), 7))
        got = aggregate_mean([ParameterBundle({"head": r}, manifest) for r in rows]).vectors["head"]
        exact = [float(sum(Fraction(v) for v in rows[:, j]) / len(rows)) for j in range(7)]
        mean_err = max(mean_err, float(np.max(np.abs(got - exact))))

    ds = gen_blobs(4, 60, 4, 8.0, seed=10)
    part = partition_heterogeneous(ds, 10, (2, 3), seed=10)
    clients = [ClientState(i, ds.subset(ix)) for i, ix in enumerate(part.indices)]
    arch = Architecture(4, 4, hidden=(8,), flow_depth=2, activation="relu", log_budget=5.0)
    cfg = FederationConfig(num_clients=10, rounds=6, local_steps=2, participation=0.35,
                           batch_size=16, personalize_epochs=2)
    server, clients = run_federated_training(cfg, arch, clients)
    counts_ok = all(len(h["active"]) == math.floor(0.35 * 10) for h in server.history)
    enc = server.model.digest("encoder")
    local_personalization_stage(clients, cfg)
    enc_ok = all(c.model.digest("encoder") == enc for c in clients)

    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["--out", str(out), "--seed", "5", "--deterministic",
                "--set", "data.num_classes=4", "--set", "data.input_dim=4",
                "--set", "data.train_per_class=100", "--set", "data.test_per_class=20",
                "--set", "model.hidden=[8]", "--set", "model.flow_depth=2",
                "--set", "model.log_budget=5", "--set", "model.activation=relu",
                "--set", "federation.num_clients=3", "--set", "federation.rounds=2",
                "--set", "federation.local_steps=2", "--set", "federation.personalize_epochs=1"]
        assert main(["train-federated", *args]) == 0
        for stage in ("personalize", "calibrate", "evaluate"):
            assert main([stage, "--out", str(out), "--deterministic"]) == 0
        files = sorted(p for p in out.rglob("*")
                       if p.suffix in (".csv", ".jsonl", ".bundle") or p.name == "policies.json")
        runs.append({str(p.relative_to(out)): p.read_bytes() for p in files})
    identical = runs[0] == runs[1] and len(runs[0]) > 0
    elapsed = time.perf_counter() - t0
    ok = mean_err <= 1e-12 and counts_ok and enc_ok and identical
    _check(report, 10, ok, f"mean err {mean_err:.1e}, participation floor each round {counts_ok}, "
                           f"encoder unchanged {enc_ok}, reruns byte-identical {identical} "
                           f"({len(runs[0])} files)", elapsed, 120.0)


# 11 ----------------------------------------------------------------------------


def test_acceptance_11_calibration_order_statistic(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    bad = []
    for p in (0.05, 0.10, 0.20):
        for n in (20, 101, 1000):
            scores = rng.normal(size=n)
            for kind in ("log-density", "entropy"):
                tau = calibrate_threshold(scores, p, kind)
                flagged = int(is_uncertain(scores, tau, kind).sum())
                if flagged != math.ceil(Fraction(str(p)) * n):
                    bad.append((p, n, kind, flagged))
    elapsed = time.perf_counter() - t0
    _check(report, 11, not bad, f"18/18 (p, n, kind) cells flag ceil(p n)" if not bad else
           f"mismatches {bad}", elapsed, 1.0)
