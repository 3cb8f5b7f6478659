"""Lottery-ticket pruning: mask math, schedule arithmetic, learnability."""

import numpy as np
import pytest

from nasforge import pruning as P
from nasforge import space as S
from nasforge import supernet as SN
from nasforge import tensor as T
from nasforge.data import split, synth_generate
from nasforge.operators import _uniform
from nasforge.training import TrainConfig, predict
from nasforge.metrics import log_loss


def make_model(seed=0):
    cfg = S.SpaceConfig(num_blocks=2, dense_ops=("FC", "DP"), sparse_ops=("EFC",),
                        dense_dims=(16, 32), sparse_dims=(4, 8),
                        weight_bits_choices=(8,), dim_s=4)
    data = synth_generate(5, 6, 40, 8000, seed=seed)
    net = SN.Supernet(cfg, data.feature_spec, seed=seed + 1)
    g = S.Genotype(blocks=(
        S.make_block((0,), [("FC", 32, 8), ("DP", 32, 8)], [("EFC", 8, 8)]),
        S.make_block((0, 1), [("FC", 32, 8)], [("EFC", 8, 8)]),
    ))
    return SN.extract_subnet(net, g), data


class TestGenMask:
    def test_zero_second_layer_gives_half(self):
        rng = np.random.default_rng(0)
        w = T.Tensor(rng.standard_normal((4, 6)))
        mlp = {"w1": _uniform(rng, (8, 4), 4), "w2": T.Tensor(np.zeros((4, 8)))}
        np.testing.assert_allclose(P.gen_mask(w, mlp).data, 0.5)

    @pytest.mark.parametrize("shape", [(2, 3), (5, 5)])
    def test_shape_preserved(self, shape):
        rng = np.random.default_rng(1)
        m, n = shape
        w = T.Tensor(rng.standard_normal(shape))
        mlp = {"w1": _uniform(rng, (2 * m, m), m), "w2": _uniform(rng, (m, 2 * m), 2 * m)}
        assert P.gen_mask(w, mlp).shape == shape

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        mlp = {"w1": _uniform(rng, (6, 3), 3), "w2": _uniform(rng, (3, 6), 6)}
        with pytest.raises(T.ShapeError):
            P.gen_mask(T.Tensor(np.zeros((4, 2))), mlp)

    def test_gradients_flow_to_mlp(self):
        rng = np.random.default_rng(3)
        w = T.constant(rng.standard_normal((3, 4)))
        w2 = T.Tensor(rng.standard_normal((3, 6)) * 0.5, requires_grad=True)
        w1 = T.constant(rng.standard_normal((6, 3)) * 0.5)

        def f(t):
            mask = T.sigmoid(T.matmul(t, T.relu(T.matmul(w1, w))))
            return T.sum_all(T.mul(T.mul(mask, w), mask))

        assert T.grad_check(f, w2) < 1e-4


class TestApplyMask:
    def test_identity(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((3, 5))
        out = P.apply_mask(w, np.ones((3, 5)), np.ones((3, 5), dtype=bool))
        np.testing.assert_array_equal(out.data, w)

    def test_all_hard_zero(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((3, 5))
        out = P.apply_mask(w, np.ones((3, 5)), np.zeros((3, 5), dtype=bool))
        np.testing.assert_array_equal(out.data, np.zeros((3, 5)))

    def test_random_elementwise_oracle(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((4, 4))
        m = rng.random((4, 4))
        keep = rng.random((4, 4)) > 0.3
        np.testing.assert_allclose(P.apply_mask(w, m, keep).data, m * w * keep)


class TestSchedule:
    def test_surviving_fractions_follow_08_pow_t(self):
        model, data = make_model(seed=7)
        tr, va, _ = split(data, seed=8)
        budget = TrainConfig(batch_size=512, max_steps=4, log_every=100)
        _, state, rows = P.iterate_prune(model, (tr, va), 5, budget, seed=9)
        total = sum(k.size for k in state.keep.values())
        for t in range(1, 6):
            expect = 0.8 ** t
            # per-matrix integer rounding allows one entry of slack per matrix
            slack = len(state.keep) / total + 1e-12
            assert abs(rows[t].surviving_fraction - expect) <= 5 * slack + 0.01

    def test_monotone_subset(self):
        model, data = make_model(seed=10)
        tr, va, _ = split(data, seed=11)
        budget = TrainConfig(batch_size=512, max_steps=3, log_every=100)
        keeps = []

        state = P.init_mask_state(model, seed=12)
        theta0 = {n: t.data.copy() for n, t in model.params.items()}
        rng_scores = np.random.default_rng(13)
        for _ in range(4):
            scores = {name: rng_scores.random(k.shape) for name, k in state.keep.items()}
            before = {name: k.copy() for name, k in state.keep.items()}
            P._harden(state, scores, per_matrix=True, rate=0.2)
            for name in state.keep:
                assert np.all(before[name] | ~state.keep[name] | before[name])
                assert np.all(state.keep[name] <= before[name])

    def test_t_zero_untouched(self):
        model, data = make_model(seed=14)
        tr, va, _ = split(data, seed=15)
        before = model.checksum()
        _, _, rows = P.iterate_prune(model, (tr, va), 0,
                                     TrainConfig(batch_size=512, max_steps=2), seed=16)
        assert model.checksum() == before and rows == []

    def test_magnitude_shares_schedule(self):
        model, data = make_model(seed=17)
        tr, va, _ = split(data, seed=18)
        budget = TrainConfig(batch_size=512, max_steps=3, log_every=100)
        _, state_m, rows_m = P.magnitude_prune(model, (tr, va), 3, budget, seed=19)
        model2, _ = make_model(seed=17)
        _, state_k, rows_k = P.iterate_prune(model2, (tr, va), 3, budget, seed=19)
        assert [r.surviving_fraction for r in rows_m] == \
               [r.surviving_fraction for r in rows_k]

    def test_deterministic_under_seed(self):
        rows = []
        for _ in range(2):
            model, data = make_model(seed=20)
            tr, va, _ = split(data, seed=21)
            budget = TrainConfig(batch_size=512, max_steps=3, log_every=100)
            _, _, r = P.iterate_prune(model, (tr, va), 2, budget, seed=22)
            rows.append([(x.iteration, x.log_loss, x.mflops) for x in r])
        assert rows[0] == rows[1]

    def test_structured_flops_column_collapse(self):
        model, data = make_model(seed=23)
        state = P.init_mask_state(model, seed=24)
        base = model.flops_per_sample()
        name = P.prunable_names(model)[0]
        k = state.keep[name]
        k[:, 0] = False          # a full column gone
        collapsed = P._structured_flops(model, state.keep)
        m, n = k.shape
        assert collapsed == base - 2 * m  # one column of an m x n dense matrix
        # elementwise zeros without a full row/column give no credit
        k[:, 0] = True
        k[0, 1] = False
        assert P._structured_flops(model, state.keep) == base

    def test_report_rows_layout(self):
        model, data = make_model(seed=25)
        tr, va, _ = split(data, seed=26)
        budget = TrainConfig(batch_size=512, max_steps=3, log_every=100)
        _, _, rows = P.iterate_prune(model, (tr, va), 1, budget, seed=27)
        csv_rows = P.report_csv_rows("synthetic", "mask", rows)
        assert csv_rows[0] == ("dataset", "variant", "T", "log_loss", "mflops", "percent")
        assert len(csv_rows) == 3  # header + T=0 + T=1


class TestLearnability:
    def test_t3_mask_pruning_degrades_little(self):
        model, data = make_model(seed=28)
        tr, va, _ = split(data, seed=29)
        budget = TrainConfig(batch_size=512, epochs=3, max_steps=120, seed=30, log_every=100)
        _, _, rows = P.iterate_prune(model, (tr, va), 3, budget, seed=31)
        unpruned = rows[0].log_loss
        pruned = rows[3].log_loss
        assert pruned < np.log(2)
        assert pruned - unpruned < 0.01
