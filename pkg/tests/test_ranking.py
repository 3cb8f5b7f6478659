"""Ranking metrics and the subnet-sampling experiment."""

import numpy as np
import pytest

from nasforge import metrics as M
from nasforge import space as S
from nasforge import supernet as SN
from nasforge.data import split, synth_generate
from nasforge.ranking import rank_experiment
from nasforge.training import TrainConfig


def brute_force_tau(a, b):
    n = len(a)
    conc = disc = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                ties_a += 1
                ties_b += 1
            elif da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif da * db > 0:
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) / 2
    return (conc - disc) / np.sqrt((n0 - ties_a) * (n0 - ties_b))


def brute_force_rho(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.cov(a, b, bias=True)[0, 1] / (a.std() * b.std()))


class TestKendallTau:
    def test_identical(self):
        assert M.kendall_tau([1, 2, 3], [10, 20, 30]) == 1.0

    def test_reversed(self):
        assert M.kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0

    def test_hand_case(self):
        assert M.kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(ValueError):
            M.kendall_tau([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            M.kendall_tau([5, 5, 5], [1, 2, 3])

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for n in (2, 5, 30, 200):
            a = np.round(rng.random(n) * 4, 1)
            b = np.round(rng.random(n) * 4, 1)
            if np.all(a == a[0]) or np.all(b == b[0]):
                continue
            assert M.kendall_tau(a, b) == pytest.approx(brute_force_tau(a, b), abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        a, b = rng.random(50), rng.random(50)
        assert M.kendall_tau(np.exp(a * 3), b) == pytest.approx(M.kendall_tau(a, b))


class TestPearson:
    def test_proportional(self):
        assert M.pearson_rho([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)

    def test_negative_affine(self):
        a = np.array([0.3, 1.2, -0.7, 2.0])
        assert M.pearson_rho(a, -a + 7) == pytest.approx(-1.0)

    def test_hand_case(self):
        assert M.pearson_rho([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        a, b = rng.random(100), rng.random(100)
        assert M.pearson_rho(a, b) == pytest.approx(brute_force_rho(a, b), abs=1e-12)

    def test_invariant_under_positive_affine(self):
        rng = np.random.default_rng(3)
        a, b = rng.random(40), rng.random(40)
        assert M.pearson_rho(3 * a + 1, b) == pytest.approx(M.pearson_rho(a, b))


def tiny_setup():
    cfg = S.SpaceConfig(num_blocks=2, dense_ops=("FC", "DP"), sparse_ops=("EFC",),
                        dense_dims=(8, 16), sparse_dims=(4, 8),
                        weight_bits_choices=(8,), dim_s=4)
    data = synth_generate(5, 6, 40, 6000, seed=4)
    tr, va, te = split(data, seed=5)
    net = SN.Supernet(cfg, data.feature_spec, seed=6)
    return cfg, net, tr, va


class TestRankExperiment:
    def test_self_consistency_tau_one(self):
        # scoring both axes with the same oracle -> tau = 1
        scores = [0.41, 0.52, 0.44, 0.61, 0.39]
        assert M.kendall_tau(scores, scores) == 1.0

    def test_anticorrelated_oracle(self):
        scores = np.array([0.41, 0.52, 0.44, 0.61, 0.39])
        assert M.kendall_tau(list(scores), list(-scores)) == -1.0

    def test_experiment_runs_and_is_deterministic(self):
        cfg, net, tr, va = tiny_setup()
        budget = TrainConfig(batch_size=512, max_steps=15, log_every=100)
        rep1, cdf1 = rank_experiment(net, 6, tr, va, finetune=False, seed=7, scratch=budget)
        rep2, cdf2 = rank_experiment(net, 6, tr, va, finetune=False, seed=7, scratch=budget)
        assert rep1.pairs == rep2.pairs and cdf1 == cdf2
        assert -1.0 <= rep1.tau <= 1.0 and -1.0 <= rep1.rho <= 1.0
        assert rep1.n == 6 and len(cdf1) == 6
        assert cdf1[-1][2] == pytest.approx(1.0)
        losses = [row[1] for row in cdf1]
        assert losses == sorted(losses)

    def test_finetune_flag_changes_supernet_axis_only(self):
        cfg, net, tr, va = tiny_setup()
        budget = TrainConfig(batch_size=512, max_steps=10, log_every=100)
        rep_no, _ = rank_experiment(net, 4, tr, va, finetune=False, seed=8, scratch=budget)
        rep_ft, _ = rank_experiment(net, 4, tr, va, finetune=True, seed=8, scratch=budget,
                                    finetune_steps=10)
        scratch_no = [p[1] for p in rep_no.pairs]
        scratch_ft = [p[1] for p in rep_ft.pairs]
        assert scratch_no == pytest.approx(scratch_ft)
        sup_no = [p[0] for p in rep_no.pairs]
        sup_ft = [p[0] for p in rep_ft.pairs]
        assert sup_no != pytest.approx(sup_ft)

    def test_top_fraction_report_present(self):
        cfg, net, tr, va = tiny_setup()
        budget = TrainConfig(batch_size=512, max_steps=10, log_every=100)
        rep, _ = rank_experiment(net, 6, tr, va, finetune=False, top_fraction=0.5,
                                 seed=9, scratch=budget)
        assert rep.top_fraction == 0.5
        assert rep.tau_top is None or -1.0 <= rep.tau_top <= 1.0
