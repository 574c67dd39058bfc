"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line that
is also collected into the ``acceptance criteria`` section of the pytest
summary.

Criteria 6 to 9 train real models and take several minutes in total.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles as O
from conftest import record_criterion
from crlab import experiments as X
from crlab import losses as L
from crlab.data import DatasetSpec, generate_dataset
from crlab.model import EmaShadow, ModelParams, ModelSpec, ema_update
from crlab.numerics import l2_normalize, make_rng, max_relative_error, softmax
from crlab.trainer import OptimizerState, TrainConfig, cosine_lr, metrics_csv, run, sgd_nesterov_step

SEEDS = [0, 1, 2, 3, 4]
STEPS = 20_000
OPENSET_STEPS = 5_000
BASE = TrainConfig(steps=STEPS, eval_interval=500)
DATA = DatasetSpec()

pytestmark = pytest.mark.acceptance


def _sizes(rng):
    n = int(rng.integers(3, 13))
    dim = int(rng.integers(2, 9))
    k = int(rng.integers(1, 5))
    tau = (1.0, 0.1, 0.01)[int(rng.integers(3))]
    return n, dim, k, tau


def _grouped(rng, n, k, delta):
    m = 2 if n % 2 == 0 else 1
    src = np.tile(np.arange(n // m), m)
    pl = L.pseudo_labels_from_probs(rng.dirichlet(np.full(k, 0.5), size=n // m), delta, delta)
    return src, pl


# -- 1 ---------------------------------------------------------------------------


def test_criterion_01_contrastive_gradients():
    rng = make_rng(2024)
    t0 = time.perf_counter()
    exact, chain = [], []
    for _ in range(100):
        n, dim, k, tau = _sizes(rng)
        labels = rng.integers(0, k, size=n)
        labels[1] = labels[0]
        h = rng.standard_normal((n, dim)) / np.sqrt(dim * tau)
        g = L.grad_cr_exact(h, labels, 0)
        exact.append(max_relative_error(-g.views, O.fd_mp(lambda x: O.r_mp(x, labels, 0), h)))
    for _ in range(100):
        n, dim, k, tau = _sizes(rng)
        src, pl = _grouped(rng, n, k, 0.6)
        raw = rng.standard_normal((n, dim))
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        z = raw / norm
        _, gz = L.contrastive_loss(z, pl, src, tau)
        g = (gz - z * np.sum(z * gz, axis=1, keepdims=True)) / norm
        chain.append(max_relative_error(g, O.fd_cr_mp(raw, pl.q_hat[src], pl.mask_cr[src], tau)))
    secs = time.perf_counter() - t0
    ok = max(exact) <= 1e-6 and max(chain) <= 1e-6 and secs < 10
    record_criterion(1, ok, f"closed-form max rel err {max(exact):.2e}, full-chain {max(chain):.2e} (tol 1e-6), {secs:.1f}s (< 10s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------


def _brute_eq3(h, probs, q_hat, mask):
    n, k = probs.shape
    out = np.zeros((h.shape[1], k))
    for v in range(n):
        for i in range(k):
            if mask[v] and q_hat[v] == i:
                for j in range(h.shape[1]):
                    out[j, i] += h[v, j] * (1.0 - probs[v, i])
    return out / n


def test_criterion_02_consistency_gradients():
    from crlab.gradcheck import fd_cs_mp

    rng = make_rng(2025)
    t0 = time.perf_counter()
    closed, full = [], []
    for _ in range(100):
        n, dim, k, _ = _sizes(rng)
        k = max(k, 2)
        src, pl = _grouped(rng, n, k, 0.5)
        h = rng.standard_normal((n, dim))
        W = rng.standard_normal((dim, k))
        probs = softmax(h @ W)
        eq3 = L.grad_cs_wrt_classweights(h, probs, pl, src)
        closed.append(float(np.max(np.abs(eq3 - _brute_eq3(h, probs, pl.q_hat[src], pl.mask_cs[src])))))
        _, g_logits = L.consistency_loss(h @ W, pl, src)
        gW = h.T @ g_logits
        gh = -L.grad_cs_wrt_features(W, probs, pl, src)
        fW, fh = fd_cs_mp(W, h, pl.q_hat[src], pl.mask_cs[src])
        full.append(max(max_relative_error(gW, fW), max_relative_error(gh, fh)))
    secs = time.perf_counter() - t0
    ok = max(closed) <= 1e-12 and max(full) <= 1e-6 and secs < 10
    record_criterion(2, ok, f"per-class form vs brute force {max(closed):.2e} (tol 1e-12), full gradient vs FD {max(full):.2e} (tol 1e-6), {secs:.1f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------


def test_criterion_03_loss_oracles():
    rng = make_rng(2026)
    worst = {"L_L": 0.0, "R_CS": 0.0, "R_CR": 0.0, "NT-Xent": 0.0}
    for _ in range(100):
        k = int(rng.integers(2, 5))
        n_src = int(rng.integers(2, 6))
        src = np.tile(np.arange(n_src), 2)
        pl = L.pseudo_labels_from_probs(rng.dirichlet(np.full(k, 0.5), size=n_src), 0.5, 0.5)
        logits = rng.standard_normal((len(src), k)) * 3
        y = rng.integers(0, k, len(src))
        z = l2_normalize(rng.standard_normal((len(src), int(rng.integers(2, 9)))))
        tau = float(rng.choice([1.0, 0.5, 0.1]))
        worst["L_L"] = max(worst["L_L"], abs(L.supervised_loss(logits, y)[0] - O.ce_oracle(logits, y)))
        cs = L.consistency_loss(logits, pl, src)[0]
        worst["R_CS"] = max(worst["R_CS"], abs(cs - O.cs_oracle(logits, pl.q_hat[src], pl.mask_cs[src])))
        cr = L.contrastive_loss(z, pl, src, tau)[0]
        worst["R_CR"] = max(worst["R_CR"], abs(cr - O.cr_oracle(z, pl.q_hat[src], pl.mask_cr[src], tau)))
        nt = L.ntxent_loss(z, src, tau)[0]
        worst["NT-Xent"] = max(worst["NT-Xent"], abs(nt - O.ntxent_oracle(z, src, tau)))
    ok = max(worst.values()) <= 1e-10
    record_criterion(3, ok, "max |pkg - oracle| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-10)")
    assert ok


# -- 4 ---------------------------------------------------------------------------


def test_criterion_04_exclusion_property():
    rng = make_rng(2027)
    passes = 0
    min_norm = math.inf
    for _ in range(20):
        k = int(rng.integers(2, 5))
        n_src = int(rng.integers(3, 8))
        c = int(rng.integers(k))
        q = rng.dirichlet(np.full(k, 0.5), size=n_src)
        q[0] = np.eye(k)[c] * 0.98 + 0.02 / k
        q[1] = np.eye(k)[c] * 0.4 + 0.6 / k
        pl = L.pseudo_labels_from_probs(q, 0.95, 0.95)
        assert pl.mask_cs[0] and not pl.mask_cs[1] and pl.q_hat[1] == c
        src = np.tile(np.arange(n_src), 2)
        W = rng.standard_normal((6, k))
        h = rng.standard_normal((len(src), 6))
        g_feat = L.grad_cs_wrt_features(W, softmax(h @ W), pl, src)
        z = l2_normalize(rng.standard_normal((len(src), 5)))
        _, gz = L.contrastive_loss(z, pl, src, 0.01)
        views = np.flatnonzero(src == 1)
        cs_zero = not g_feat[views].any()
        norms = np.linalg.norm(gz[views], axis=1)
        min_norm = min(min_norm, float(norms.min()))
        passes += int(cs_zero and np.all(norms > 1e-8))
    ok = passes == 20
    record_criterion(4, ok, f"{passes}/20 constructions: R_CS grad exactly 0, R_CR grad norm >= {min_norm:.2e} (> 1e-8)")
    assert ok


# -- 5 ---------------------------------------------------------------------------


def test_criterion_05_first_order_optimum():
    rng = make_rng(2028)
    results = []
    for _ in range(10):
        n = int(rng.integers(3, 10))
        h = rng.standard_normal((n, int(rng.integers(2, 9))))
        labels = np.zeros(n, dtype=int)
        gap, used = math.inf, 0
        for used in range(1, 10_001):
            g = L.grad_cr_exact(h, labels, 0)
            gap = float(np.max(np.abs(g.scores[1:] - 1.0 / (n - 1))))
            if gap < 1e-4:
                break
            h = h + 1.0 * g.views
        results.append((gap, used))
    ok = all(g < 1e-4 for g, _ in results)
    record_criterion(5, ok, f"10 starts, worst gap {max(g for g, _ in results):.1e} (< 1e-4), max steps {max(u for _, u in results)}")
    assert ok


# -- 6, 7, 9: shared runs on the default task ---------------------------------------


@pytest.fixture(scope="module")
def efficiency():
    t0 = time.perf_counter()
    rep = X.run_efficiency_experiment(BASE, DATA, SEEDS)
    return rep, time.perf_counter() - t0


def test_criterion_06_efficiency(efficiency):
    rep, secs = efficiency
    per = rep.summary["per_seed"]
    fracs = [per[s]["crossover_fraction"] for s in SEEDS]
    good = rep.summary["seeds_crossover_le_half"]
    ok = good >= 4 and secs <= 660
    shown = ", ".join("none" if f is None else f"{f:.3f}" for f in fracs)
    record_criterion(6, ok, f"crossover fraction per seed [{shown}], {good}/5 <= 0.5 (need 4), 10 runs in {secs / 60:.1f} min")
    assert ok


def test_criterion_07_silhouette(efficiency):
    rep, _ = efficiency
    good = rep.summary["seeds_silhouette_dominates"]
    steps = rep.checkpoints()
    margins = []
    for s in SEEDS:
        cr = rep.column("cs+cr", s, "silhouette")
        cs = rep.column("cs-only", s, "silhouette")
        late = [a - b for a, b, t in zip(cr, cs, steps) if t > 0.1 * STEPS]
        margins.append(min(late))
    ok = good >= 4
    record_criterion(7, ok, f"{good}/5 seeds with silhouette(cs+cr) >= silhouette(cs-only) after 10% (need 4); min margins " + ", ".join(f"{m:+.3f}" for m in margins))
    assert ok


def test_criterion_09_ntxent(efficiency):
    rep, _ = efficiency
    nt = X.run_arms([X.Arm("cs+ntxent", (("loss_mode", "cs+ntxent"),))], BASE, DATA, SEEDS)
    pairs = [(nt[("cs+ntxent", s)][-1].acc_ema, rep.final("cs+cr", s)) for s in SEEDS]
    good = sum(a < b for a, b in pairs)
    ok = good >= 4
    record_criterion(9, ok, f"{good}/5 seeds with acc(cs+ntxent) < acc(cs+cr) (need 4): " + ", ".join(f"{a:.3f}<{b:.3f}" for a, b in pairs))
    assert ok


# -- 8 ---------------------------------------------------------------------------


def test_criterion_08_openset():
    base = replace(BASE, steps=OPENSET_STEPS)
    n = DATA.n_unlabeled
    counts = [0, n // 2, n, 2 * n]
    rep = X.run_openset_experiment(base, DATA, counts, SEEDS, preset="far")
    good = rep.summary["seeds_cr_degrades_less"]
    deg = [rep.summary["per_seed"][s]["degradation"] for s in SEEDS]
    ok = good >= 4
    record_criterion(
        8,
        ok,
        f"far OOD at {counts}, S={OPENSET_STEPS}: {good}/5 seeds with degradation(cs+cr) >= degradation(cs-only) (need 4); "
        + ", ".join(f"{d['cs+cr']:+.3f} vs {d['cs-only']:+.3f}" for d in deg),
    )
    assert ok


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_threshold_structure():
    ds = generate_dataset(DATA)
    zero = run(replace(BASE, steps=300, eval_interval=25, delta=0.0, delta_prime=0.0), ds)
    all_one = all(r.mask_cs == 1.0 and r.mask_cr == 1.0 for r in zero.rows)
    init = run(replace(BASE, steps=0), ds).rows[0]
    ok = all_one and init.mask_cs == 0.0
    record_criterion(10, ok, f"delta=delta'=0: masks 1.0 at all {len(zero.rows)} logged steps = {all_one}; delta=0.95 step-0 mask_cs = {init.mask_cs}")
    assert ok


# -- 11 --------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    ds = generate_dataset(DATA)
    cfg = replace(BASE, steps=400, eval_interval=100)
    run(cfg, ds, tmp_path / "a")
    run(cfg, generate_dataset(DATA), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = a == b and len(a) > 0
    record_criterion(11, ok, f"two identical runs -> metric CSVs byte-identical = {a == b} ({len(a)} bytes)")
    assert ok


# -- 12 --------------------------------------------------------------------------


def test_criterion_12_unit_examples():
    checks = {}
    checks["softmax uniform"] = np.allclose(softmax(np.zeros(3)), 1 / 3, atol=1e-15)
    checks["softmax ln2"] = np.allclose(softmax(np.array([math.log(2), 0, 0])), [0.5, 0.25, 0.25], atol=1e-15)
    checks["normalize 3-4-5"] = np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-15)
    spec = ModelSpec(1, 1, hidden=(), feat_dim=1, proj_dim=1)
    ema = ema_update(EmaShadow({"p.w": np.zeros(1)}, 0.999), ModelParams(spec, {"p.w": np.ones(1)}))
    checks["EMA 0.001"] = abs(ema.tensors["p.w"][0] - 0.001) < 1e-15
    checks["cosine end 0.19509"] = round(cosine_lr(100, 100, 1.0), 5) == 0.19509
    checks["cosine mid 0.77301"] = round(cosine_lr(50, 100, 1.0), 5) == 0.77301
    checks["cosine start"] = cosine_lr(0, 100, 0.03) == 0.03
    p, _ = sgd_nesterov_step(ModelParams(spec, {"p.w": np.ones(1)}), {"p.w": np.ones(1)}, OptimizerState({"p.w": np.zeros(1)}), 0.1, 0.9)
    checks["Nesterov 0.81"] = abs(p.tensors["p.w"][0] - 0.81) < 1e-15
    z = np.tile([[1.0, 0.0]], (4, 1))
    one = L.pseudo_labels_from_probs(np.array([[1.0, 0.0]]), 0.5, 0.5)
    checks["R_CR ln3"] = abs(L.contrastive_loss(z, one, np.zeros(4, dtype=int), 1.0)[0] - math.log(3)) < 1e-12
    zz = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    checks["NT-Xent 0.5514"] = round(L.ntxent_loss(zz, np.array([0, 1, 0, 1]), 1.0)[0], 4) == 0.5514
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    record_criterion(12, ok, f"{len(checks) - len(failed)}/{len(checks)} stated examples reproduced" + (f"; failed: {failed}" if failed else ""))
    assert ok
