import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from oracles import eer_oracle, isotonic_oracle, min_dcf_oracle
from xvkit.calibration import (
    NONTARGET,
    TARGET,
    UNKNOWN,
    CalibrationMap,
    DcfConfig,
    FusionModel,
    TrialScoreSet,
    act_dcf,
    act_dcf_points,
    apply_key,
    eer,
    evaluate_trials,
    format_report,
    fusion_fit,
    isotonic_blocks,
    isotonic_fit,
    min_dcf,
    min_dcf_points,
    pav_apply,
    pav_fit,
    read_key,
    read_scores,
    write_key,
    write_scores,
)
from xvkit.errors import ConfigError, DataError

small_instances = st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 4).map(float), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n),
))


def random_instance(rng, n_max=1000):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.random(n) < rng.uniform(0.05, 0.95)
    labels[0], labels[1] = True, False
    if rng.random() < 0.5:
        scores = rng.integers(0, 20, size=n).astype(float)  # many ties
    else:
        scores = rng.normal(size=n) + 1.5 * labels
    return scores, labels


class TestTrialScoreSet:
    def test_validation(self):
        with pytest.raises(DataError):
            TrialScoreSet(["a"], ["b"], [np.inf], [TARGET])
        with pytest.raises(DataError):
            TrialScoreSet(["a", "a"], ["b", "b"], [1.0, 2.0], [TARGET, NONTARGET])

    def test_file_round_trip(self, tmp_path):
        t = TrialScoreSet(["e1", "e1", "e2"], ["t1", "t2", "t1"], [0.5, -1.25, 3.0],
                          [TARGET, NONTARGET, UNKNOWN])
        write_scores(tmp_path / "s.txt", t)
        assert (tmp_path / "s.txt").read_text().splitlines()[0] == "e1 t1 0.500000"
        back = read_scores(tmp_path / "s.txt")
        assert_allclose(back.scores, t.scores)
        write_key(tmp_path / "k.txt", t.keys()[:2], [TARGET, NONTARGET])
        with pytest.warns(UserWarning, match="missing from key"):
            keyed = apply_key(back, read_key(tmp_path / "k.txt"))
        assert list(keyed.labels) == [TARGET, NONTARGET]

    def test_bad_key_line(self, tmp_path):
        (tmp_path / "k.txt").write_text("a b maybe\n")
        with pytest.raises(DataError):
            read_key(tmp_path / "k.txt")


class TestEer:
    def test_examples(self):
        assert eer([0.0, 1.0, 0.0, 1.0], [True, True, False, False]) == 50.0
        assert eer([2.0, 3.0, 0.0, 1.0], [True, True, False, False]) == 0.0

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            s, lab = random_instance(rng, 300)
            assert abs(eer(s, lab) - eer_oracle(s[lab].tolist(), s[~lab].tolist())) < 1e-9

    @given(st.lists(st.integers(-40, 40), min_size=1, max_size=30),
           st.lists(st.integers(-40, 40), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_range_and_monotone_invariance(self, tar, non):
        s = np.array(tar + non, dtype=float)
        lab = np.array([True] * len(tar) + [False] * len(non))
        e = eer(s, lab)
        assert 0.0 <= e <= 100.0
        assert abs(eer(np.exp(s / 8) * 3 + 1, lab) - e) < 1e-9
        assert abs(min_dcf(s ** 3, lab) - min_dcf(s, lab)) < 1e-12

    def test_inverted_scores(self):
        # the sweep definition is not folded at chance level: a reversed system scores 100%
        assert eer([0.0, 1.0], [True, False]) == 100.0

    def test_single_class(self):
        with pytest.raises(DataError):
            eer([1.0, 2.0], [True, True])


class TestDcf:
    def test_min_dcf_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            s = rng.normal(size=200)
            lab = rng.random(200) < 0.3
            s[lab] += 1.0
            got = min_dcf_points(s, lab)
            for p, v in got.items():
                assert abs(v - min_dcf_oracle(s[lab].tolist(), s[~lab].tolist(), p)) < 1e-12

    def test_boundaries(self):
        assert min_dcf([2.0, 3.0, 0.0, 1.0], [True, True, False, False]) == 0.0
        assert min_dcf(np.zeros(10), np.arange(10) < 5) == 1.0

    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=40), st.lists(st.floats(-20, 20), min_size=1, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_act_at_least_min(self, tar, non):
        s = np.array(tar + non)
        lab = np.array([True] * len(tar) + [False] * len(non))
        mins, acts = min_dcf_points(s, lab), act_dcf_points(s, lab)
        for p in mins:
            assert acts[p] >= mins[p] - 1e-12
            assert 0.0 <= mins[p] <= 1.0

    def test_calibrated_gaussians(self):
        rng = np.random.default_rng(2)
        mu = 4.0  # target LLR ~ N(mu, 2mu), nontarget ~ N(-mu, 2mu) is exactly calibrated
        n = 100000
        lab = rng.random(n) < 0.5
        s = np.where(lab, mu, -mu) + rng.normal(size=n) * math.sqrt(2 * mu)
        assert act_dcf(s, lab) - min_dcf(s, lab) < 0.05

    def test_shift_miscalibrates(self):
        rng = np.random.default_rng(3)
        lab = rng.random(5000) < 0.5
        s = np.where(lab, 3.0, -3.0) + rng.normal(size=5000) * math.sqrt(6)
        assert act_dcf(s + 10, lab) > act_dcf(s, lab)
        assert min_dcf(s + 10, lab) == min_dcf(s, lab)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            DcfConfig(p_targets=(0.0,))
        with pytest.raises(ConfigError):
            DcfConfig(c_miss=0)

    def test_report(self):
        t = TrialScoreSet.from_arrays([2.0, 3.0, 0.0, 1.0], [True, True, False, False])
        rep = evaluate_trials(t, name="sys")
        text = format_report([rep])
        assert text.splitlines()[0].split()[:2] == ["system", "EER(%)"]
        assert "sys" in text and rep.n_target == 2 and rep.eer == 0.0


class TestPav:
    def test_pooled_pair(self):
        cal = pav_fit([1.0, 2.0], [True, False])
        assert pav_apply(cal, 1.0) == 0.0 and pav_apply(cal, 2.0) == 0.0

    def test_monotone_labels_no_pooling(self):
        lo, hi, val, _ = isotonic_blocks([1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1])
        assert_allclose(val, [0.0, 1.0])
        assert_allclose(isotonic_fit([1.0, 2.0, 3.0, 4.0], [0, 0.5, 0.75, 1]), [0, 0.5, 0.75, 1])

    @given(small_instances)
    @settings(max_examples=300, deadline=None)
    def test_exhaustive_optimum(self, inst):
        scores, labels = inst
        y = np.array(labels, dtype=float)
        fit = isotonic_fit(scores, y)
        best, vals = isotonic_oracle(scores, y)
        sse = float(((y - fit) ** 2).sum())
        assert sse <= best + 1e-12
        assert_allclose(fit, [vals[s] for s in scores], atol=1e-12)

    def test_application(self):
        rng = np.random.default_rng(4)
        s = rng.normal(size=300)
        lab = rng.random(300) < 1 / (1 + np.exp(-2 * s))
        cal = pav_fit(s, lab)
        probes = np.sort(rng.normal(size=500) * 3)
        out = pav_apply(cal, probes)
        assert np.all(np.diff(out) >= 0)
        assert pav_apply(cal, s.min() - 5) == cal.values[0]
        assert pav_apply(cal, s.max() + 5) == cal.values[-1]
        # every training score maps to the LLR of its own block
        lo, hi, post, _ = isotonic_blocks(s, lab)
        prior = lab.mean()
        llr = np.log(np.clip(post, 1e-6, 1 - 1e-6) / (1 - np.clip(post, 1e-6, 1 - 1e-6))) - math.log(prior / (1 - prior))
        idx = np.searchsorted(hi, s)
        assert_allclose(pav_apply(cal, s), llr[idx], atol=1e-12)
        back = CalibrationMap.from_dict(cal.to_dict())
        assert_allclose(back(probes), out)

    def test_single_class(self):
        with pytest.raises(DataError):
            pav_fit([1.0, 2.0], [True, True])


class TestFusion:
    def test_recovers_linear_rule(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(10000, 2))
        lab = rng.random(10000) < 1 / (1 + np.exp(-(2 * x[:, 0] + 3 * x[:, 1] - 1)))
        m = fusion_fit(x, lab)
        assert_allclose(m.weights, [2.0, 3.0], rtol=0.1)
        assert np.all(np.diff(m.objective_history) <= 1e-12)

    def test_noise_subsystem_ignored(self):
        rng = np.random.default_rng(6)
        lab = rng.random(4000) < 0.5
        x = np.column_stack([np.where(lab, 1.0, -1.0) + rng.normal(size=4000), rng.normal(size=4000)])
        w = fusion_fit(x, lab).weights
        assert abs(w[1]) < 0.1 * abs(w[0])

    def test_identical_subsystems_equal_weights(self):
        rng = np.random.default_rng(7)
        lab = rng.random(500) < 0.4
        s = np.where(lab, 1.0, -1.0) + rng.normal(size=500)
        w = fusion_fit(np.column_stack([s, s]), lab).weights
        assert abs(w[0] - w[1]) < 1e-9

    def test_separable_converges(self):
        x = np.array([[-2.0, -1.0], [-1.0, -2.0], [1.0, 2.0], [2.0, 1.0]])
        m = fusion_fit(x, [False, False, True, True])
        assert np.all(np.isfinite(m.weights)) and m.apply(x)[2] > m.apply(x)[0]

    def test_round_trip_and_errors(self):
        m = FusionModel(np.array([0.5, 1.5]), -0.25)
        assert_allclose(FusionModel.from_dict(m.to_dict()).apply(np.ones((1, 2))), [1.75])
        with pytest.raises(DataError):
            fusion_fit(np.ones((4, 2)), [True] * 4)
