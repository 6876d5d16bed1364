"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into the "acceptance criteria" section of the
pytest terminal summary (see conftest.py).
"""

import time
import zlib

import numpy as np
import pytest

from gna import attention as A
from gna import bench as Bm
from gna import bounds as B
from gna import data as D
from gna import evaluation as E
from gna import model as Mo
from gna import training as Tr
from gna.attention import GnaConfig
from gna.tensor import check_param_grads, sum_all

from test_evaluation import naive_greedy, optimal_matches, random_instance
from test_tensor import OPS, check_grads

SEED = 42


# 1 ---------------------------------------------------------------------------

def test_bound_verification(verdict):
    t0 = time.perf_counter()
    rows = list(B.verify_bound(1000, seed=SEED))
    secs = time.perf_counter() - t0
    bad = sum(r["violated"] for r in rows)
    assert len(rows) == 1000
    assert max(r["n"] for r in rows) <= 32 and max(r["d"] for r in rows) <= 8
    ok = verdict(1, "bound verification", bad == 0 and secs < 10,
                 f"{len(rows)} trials, {bad} violations, {secs:.2f}s (limit 10s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def _attention_cases():
    rng = np.random.default_rng(7)
    Q, K, V = (rng.uniform(-2, 2, (4, 4, 3)) for _ in range(3))
    idx = rng.integers(0, 16, size=(16, 2, 5))
    idx[:, :, 1] = idx[:, :, 0]
    cases = {
        "sampled_attention": (lambda q, k, v: sum_all(A.sampled_attention(q, k, v, idx)),
                              [Q.reshape(16, 3), K.reshape(16, 3), V.reshape(16, 3)]),
        "full_attention": (lambda q, k, v: sum_all(A.full_attention_2d(q, k, v)), [Q, K, V]),
        "local_attention": (lambda q, k, v: sum_all(A.local_attention(q, k, v, 3)), [Q, K, V]),
    }
    return cases


def _model_grad(variant, seed):
    cfg = Mo.ModelConfig(variant=variant, feature_channels=64)
    p = Mo.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in p.items():  # keep ReLU inputs off their kink
        if name.endswith(".b"):
            t.data[:] = rng.normal(0.0, 0.05, t.shape)
    clip = np.random.default_rng(seed).uniform(0, 1, (3, 32, 32, 3))
    if variant == "gnanet":
        fwd = lambda: sum_all(Mo.gnanet_forward(clip, p, cfg, np.random.default_rng(seed)))
    else:
        fwd = lambda: sum_all(Mo.s_gnanet_forward(clip[1], p, cfg, np.random.default_rng(seed)))
    return max(check_param_grads(fwd, p, coords_per_tensor=1).values())


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    failures = []
    for name, (f, shapes) in sorted(OPS.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(10):
            try:
                check_grads(f, *[rng.uniform(-2, 2, size=s) for s in shapes])
            except AssertionError:
                failures.append(name)
                break
    for name, (f, arrays) in _attention_cases().items():
        try:
            check_grads(f, *arrays)
        except AssertionError:
            failures.append(name)
    worst = {v: _model_grad(v, i) for i, v in enumerate(Mo.VARIANTS)}
    secs = time.perf_counter() - t0
    ok = not failures and max(worst.values()) < 1e-4 and secs < 300
    detail = (f"{len(OPS) + 3} ops ({'all ok' if not failures else 'failed: ' + ', '.join(failures)}), "
              + ", ".join(f"{k} worst rel err {v:.2e}" for k, v in worst.items())
              + f", {secs:.0f}s (limit 300s)")
    assert verdict(2, "gradient suite", ok, detail)


# 3 ---------------------------------------------------------------------------

def test_attention_invariants(verdict):
    rng = np.random.default_rng(SEED)
    stoch, hull, exhaustive, decomp = 0.0, 0.0, 0.0, 0.0
    for case in range(200):
        H, W, d = (int(v) for v in rng.integers(2, 7, 3))
        Q, K, V = (rng.normal(size=(H, W, d)) for _ in range(3))
        n = H * W
        cfg = GnaConfig(gammas=tuple(float(g) for g in rng.uniform(0.5, 4, 3)),
                        samples_per_focus=int(rng.integers(1, 10)))
        draws = A.multi_focus_draws(H, W, cfg, rng)
        w = A.sampled_attention_weights(Q.reshape(n, d), K.reshape(n, d), V.reshape(n, d), draws)
        stoch = max(stoch, float(np.max(np.abs(w.sum(-1) - 1.0))), float(-w.min()))

        Vf = V.reshape(n, d)
        for kind in A.KINDS:
            out = A.attend(kind, Q, K, V, cfg, rng, test=bool(case % 2)).data.reshape(n, d)
            hull = max(hull, float(np.max(Vf.min(0) - out)), float(np.max(out - Vf.max(0))))

        every = np.tile(np.arange(n), (n, 1))
        full = A.full_attention_2d(Q, K, V).data
        exhaustive = max(exhaustive, float(np.max(np.abs(A.gna_single(Q, K, V, 1.0, n, rng, draws=every).data - full))))

        mixed = A.multi_focus_gna(Q, K, V, cfg, rng, draws=draws).data
        per = [A.gna_single(Q, K, V, g, cfg.samples_per_focus, rng, draws=draws[:, f]).data
               for f, g in enumerate(cfg.gammas)]
        decomp = max(decomp, float(np.max(np.abs(mixed - sum(per) / len(per)))))
    ok = stoch <= 1e-9 and hull <= 1e-9 and exhaustive <= 1e-9 and decomp <= 1e-12
    assert verdict(3, "attention invariants", ok,
                   f"200 cases: row-sum dev {stoch:.1e}, hull excess {hull:.1e}, "
                   f"exhaustive vs full {exhaustive:.1e}, multi-focus decomposition {decomp:.1e}")


# 4 ---------------------------------------------------------------------------

def test_monte_carlo_variance(verdict):
    rng = np.random.default_rng(SEED)
    Q, K, V = (rng.normal(size=(12, 12, 8)) for _ in range(3))
    var = {}
    for T in (1, 4):
        cfg = GnaConfig(test_repeats=T)
        vals = [A.gna_test(Q, K, V, cfg, np.random.default_rng([SEED, s])).data[6, 5, 0] for s in range(500)]
        var[T] = float(np.var(vals, ddof=1))
    ratio = var[4] / var[1]
    assert verdict(4, "Monte-Carlo variance ratio", 0.15 <= ratio <= 0.45,
                   f"Var(T=4)/Var(T=1) = {ratio:.3f} over 500 seeds (band [0.15, 0.45])")


# 5 ---------------------------------------------------------------------------

def test_metric_oracles(verdict):
    rng = np.random.default_rng(SEED)
    mismatch = above_opt = non_monotone = 0
    for _ in range(500):
        dets, gts = random_instance(rng)
        thr = float(rng.uniform(1, 15))
        m = E.match_detections(dets, gts, thr)
        if m.pairs != naive_greedy(dets, gts, thr):
            mismatch += 1
        if m.tp > optimal_matches(dets, gts, thr):
            above_opt += 1
        aps, ars, _, _ = E.ap_ar([dets], [gts], float(rng.uniform(2, 10)))
        if any(b > a + 1e-12 for a, b in zip(aps, aps[1:])) or any(b > a + 1e-12 for a, b in zip(ars, ars[1:])):
            non_monotone += 1
    ok = mismatch == 0 and above_opt == 0 and non_monotone == 0
    assert verdict(5, "metric oracle equivalence", ok,
                   f"500 instances: {mismatch} greedy mismatches, {above_opt} above optimum, "
                   f"{non_monotone} non-monotone AP/AR")


# 6 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def reproduction():
    t0 = time.perf_counter()
    train = D.corpus_clips(D.synth_corpus(D.SynthConfig(seed=SEED), 40), 3)
    clean = D.corpus_clips(D.synth_corpus(D.SynthConfig(seed=SEED + 1000, occlusion_prob=0.0), 10), 3)
    occluded = D.corpus_clips(D.synth_corpus(D.SynthConfig(seed=SEED + 2000, occlusion_prob=0.6), 10), 3)
    tc = Tr.TrainConfig(epochs=30, seed=SEED)
    out = {"sizes": (len(train), len(clean), len(occluded))}
    for variant in Mo.VARIANTS:
        mc = Mo.ModelConfig(variant=variant)
        params, recs = Tr.train_loop(mc, tc, train)
        res = {"first": recs[0].mean_loss, "last": recs[-1].mean_loss}
        for split, clips in (("clean", clean), ("occluded", occluded)):
            maps = Tr.predict(params, mc, clips, seed=SEED)
            dets = [E.find_peaks(m) for m in maps]
            gts = [[(h.x, h.y) for h in c.target_heads] for c in clips]
            res[split] = E.ap_ar(dets, gts, 5.0)
        out[variant] = res
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_end_to_end_reproduction(verdict, reproduction):
    r = reproduction
    g, s = r["gnanet"], r["s_gnanet"]
    a = g["last"] < 0.5 * g["first"]
    b = g["clean"][3] >= 0.80
    c = g["occluded"][2] >= s["occluded"][2]
    fast = r["seconds"] < 1800
    detail = (f"clips {r['sizes']}; (a) loss {g['first']:.3f} -> {g['last']:.3f} "
              f"[s_gnanet {s['first']:.3f} -> {s['last']:.3f}]; "
              f"(b) mAR@5 clean {g['clean'][3]:.3f}; "
              f"(c) mAP@5 occluded gnanet {g['occluded'][2]:.3f} vs s_gnanet {s['occluded'][2]:.3f}; "
              f"{r['seconds'] / 60:.1f} min (limit 30)")
    assert verdict(6, "end-to-end synthetic reproduction", a and b and c and fast, detail)


# 7 ---------------------------------------------------------------------------

def test_complexity_trend(verdict):
    rows = Bm.bench_attention((8, 16, 32), channels=16, repeats=3, seed=SEED)
    t = {(r["kernel"], r["keys"]): r for r in rows}
    full_growth = t["full", 1024]["seconds"] / t["full", 64]["seconds"]
    gna_growth = t["gna", 1024]["per_query_seconds"] / t["gna", 64]["per_query_seconds"]
    ok = full_growth > 16 and gna_growth <= 2.5
    assert verdict(7, "complexity trend", ok,
                   f"keys x16: full time x{full_growth:.1f} (needs > 16), "
                   f"GNA per-query time x{gna_growth:.2f} (needs <= 2.5)")


# 8 ---------------------------------------------------------------------------

def test_smooth_feature_advantage(verdict):
    rows = B.bound_tightness_report(200, seed=SEED, blur=2.0)
    rate = B.gaussian_win_rate(rows)
    assert verdict(8, "smooth-feature advantage", rate >= 0.95,
                   f"Gaussian selection wins {rate:.1%} of 200 repetitions (needs >= 95%)")
