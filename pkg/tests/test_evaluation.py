import io
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gna import evaluation as E
from gna.errors import ContractError
from gna.evaluation import Detection


def peaks_oracle(prob, threshold, window):
    H, W = prob.shape
    h = window // 2
    found = []
    for r in range(H):
        for c in range(W):
            v = prob[r, c]
            if v < threshold:
                continue
            ok = True
            for rr in range(r - h, r + h + 1):
                for cc in range(c - h, c + h + 1):
                    if (rr, cc) == (r, c) or not (0 <= rr < H and 0 <= cc < W):
                        continue
                    before = (rr, cc) < (r, c)
                    if prob[rr, cc] > v or (before and prob[rr, cc] == v):
                        ok = False
            if ok:
                found.append((c, r, v))
    return sorted(found, key=lambda t: -t[2])


def naive_greedy(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = set()
    pairs = []
    for i in order:
        best, best_d = None, None
        for j, (gx, gy) in enumerate(gts):
            if j in used:
                continue
            d = math.sqrt((dets[i].x - gx) ** 2 + (dets[i].y - gy) ** 2)
            if d <= thr and (best_d is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            used.add(best)
            pairs.append((i, best))
    return pairs


def optimal_matches(dets, gts, thr):
    """Exhaustive search over all assignments of detections to free heads."""
    ok = [[math.dist((d.x, d.y), g) <= thr for g in gts] for d in dets]

    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(dets):
            return 0
        res = best(i + 1, used)
        for j in range(len(gts)):
            if ok[i][j] and not used & (1 << j):
                res = max(res, 1 + best(i + 1, used | (1 << j)))
        return res

    return best(0, 0)


def random_instance(rng, max_pts=8, size=30.0):
    nd, ng = int(rng.integers(0, max_pts + 1)), int(rng.integers(0, max_pts + 1))
    dets = [Detection(*rng.uniform(0, size, 2), float(rng.uniform(0.01, 0.99))) for _ in range(nd)]
    gts = [tuple(rng.uniform(0, size, 2)) for _ in range(ng)]
    return dets, gts


class TestPeaks:
    def test_zero_map(self):
        assert E.find_peaks(np.zeros((8, 8))) == []

    def test_impulse(self):
        m = np.zeros((10, 10))
        m[5, 5] = 0.9
        assert E.find_peaks(m, 0.5) == [Detection(5.0, 5.0, 0.9)]

    def test_plateau_top_left(self):
        m = np.zeros((10, 10))
        m[3:6, 4:8] = 0.7
        got = [(d.x, d.y, d.score) for d in E.find_peaks(m, 0.5, 3)]
        assert got == [(4.0, 3.0, 0.7)] == peaks_oracle(m, 0.5, 3)

    @pytest.mark.parametrize("window", [3, 5])
    def test_against_oracle(self, window):
        rng = np.random.default_rng(window)
        for _ in range(30):
            m = np.round(rng.random((9, 11)), 1)  # coarse values force ties
            got = [(d.x, d.y, d.score) for d in E.find_peaks(m, 0.3, window)]
            assert sorted(got) == sorted(peaks_oracle(m, 0.3, window))

    def test_bad_window(self):
        with pytest.raises(ContractError):
            E.find_peaks(np.zeros((3, 3)), 0.5, 4)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5]))
    def test_peaks_separated(self, seed, window):
        m = np.random.default_rng(seed).random((12, 12))
        dets = E.find_peaks(m, 0.0, window)
        for a in dets:
            for b in dets:
                if a is not b:
                    assert max(abs(a.x - b.x), abs(a.y - b.y)) > window // 2


class TestMatching:
    def test_exact(self):
        gts = [(1.0, 2.0), (5.0, 5.0), (9.0, 0.0)]
        dets = [Detection(x, y, 0.5) for x, y in gts]
        m = E.match_detections(dets, gts, 0.1)
        assert (m.tp, m.fp, m.fn) == (3, 0, 0)

    def test_no_detections(self):
        m = E.match_detections([], [(1.0, 1.0), (2.0, 2.0)], 5.0)
        assert (m.tp, m.fp, m.fn) == (0, 0, 2)

    def test_against_naive_and_optimum(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            dets, gts = random_instance(rng)
            thr = float(rng.uniform(1, 15))
            m = E.match_detections(dets, gts, thr)
            assert m.pairs == naive_greedy(dets, gts, thr)
            assert m.tp <= optimal_matches(dets, gts, thr)
            assert m.tp + m.fn == len(gts) and m.tp + m.fp == len(dets)

    def test_greedy_can_be_suboptimal(self):
        dets = [Detection(1.0, 0.0, 0.9), Detection(-0.5, 0.0, 0.1)]
        gts = [(0.0, 0.0), (2.0, 0.0)]
        assert E.match_detections(dets, gts, 1.0).tp == 1
        assert optimal_matches(dets, gts, 1.0) == 2


class TestAPAR:
    GTS = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0), (30.0, 0.0), (40.0, 0.0)]
    DETS = [Detection(0, 0, 0.9), Detection(100, 100, 0.8), Detection(10, 1, 0.7),
            Detection(20, 0, 0.6), Detection(55, 55, 0.5)]

    def test_hand_swept_curve(self):
        # ranks: TP FP TP TP FP -> precision 1, .5, 2/3, .75, .6; recall .2 .2 .4 .6 .6
        # envelope 1, .75, .75, .75, .6 -> AP = .2*1 + .2*.75 + .2*.75
        aps, ars, m_ap, m_ar = E.ap_ar([self.DETS], [self.GTS], 5.0)
        assert all(abs(a - 0.5) < 1e-9 for a in aps)
        assert all(abs(r - 0.6) < 1e-9 for r in ars)
        assert abs(m_ap - 0.5) < 1e-9 and abs(m_ar - 0.6) < 1e-9

    def test_distance_mode(self):
        aps, ars, _, _ = E.ap_ar([self.DETS], [self.GTS], 2.0, mode="distance")
        assert len(aps) == 1 and abs(aps[0] - 0.5) < 1e-9 and abs(ars[0] - 0.6) < 1e-9

    def test_perfect(self):
        dets = [[Detection(x, y, 0.8) for x, y in self.GTS]]
        aps, ars, m_ap, m_ar = E.ap_ar(dets, [self.GTS], 5.0)
        assert aps == [1.0] * 10 and ars == [1.0] * 10 and m_ap == m_ar == 1.0

    def test_none(self):
        assert E.ap_ar([[]], [self.GTS], 5.0)[2:] == (0.0, 0.0)

    def test_level_thresholds(self):
        assert abs(E.level_threshold(5.0, 0.5) - 5.0 * math.sqrt(2 * math.log(2))) < 1e-12
        for t in E.LEVELS:
            d = E.level_threshold(20.0, t)
            assert abs(math.exp(-d * d / (2 * 400.0)) - t) < 1e-12

    def test_monotone_in_level(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            imgs = [random_instance(rng) for _ in range(3)]
            aps, ars, _, _ = E.ap_ar([d for d, _ in imgs], [g for _, g in imgs], 5.0)
            assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
            assert all(a >= b - 1e-12 for a, b in zip(ars, ars[1:]))


class TestCounting:
    def test_identical(self):
        assert E.counting_metrics([3, 4, 5], [3, 4, 5]) == (0.0, 0.0)

    def test_hand_values(self):
        assert E.counting_metrics([3, 5], [4, 4]) == (1.0, 1.0)
        mae, mse = E.counting_metrics([0, 4], [4, 4])
        assert mae == 2.0 and abs(mse - math.sqrt(8)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            E.counting_metrics([1], [1, 2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=20))
    def test_mae_below_rmse(self, pairs):
        pred, true = zip(*pairs)
        mae, mse = E.counting_metrics(pred, true)
        assert mae <= mse + 1e-12


def test_report_csv():
    rep = E.evaluate([TestAPAR.DETS], [TestAPAR.GTS])
    buf = io.StringIO()
    rep.write_csv(buf, "seed=3")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# seed=3" and lines[1] == "sigma,level,AP,AR"
    assert len(lines) == 2 + 3 * 11 + 2
    assert lines[-2].startswith(",MAE,0.000000")
