"""Design assembly: layout, embeddings, lambda sharing, prediction."""

import numpy as np
import pytest
import scipy.sparse as sp

from smoothfit.basis import PenaltyCore
from smoothfit.design import (ModelSpec, TermSpec, balanced_penalty,
                              build_design, embed_penalty)
from smoothfit.errors import SpecError


def table(n=240, levels=20, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "x": rng.uniform(-1, 1, n),
        "z": rng.uniform(0, 1, n),
        "g": rng.choice([f"s{i:02d}" for i in range(levels)], n),
    }, rng


class TestBuildDesign:
    def test_intercept_plus_smooth_counts(self):
        data, _ = table()
        spec = ModelSpec([TermSpec("intercept"),
                          TermSpec("smooth", ["x"], k=10, penalty_order=2)])
        d = build_design(spec, data)
        assert d.N_p == 1 + 9
        assert d.n_lambda == 1

    def test_random_smooth_lambda_count(self):
        # fixed smooth + random smooth over 20 levels with kernel dim 1:
        # 2 + N_0 regularization parameters in total
        data, _ = table()
        spec = ModelSpec([
            TermSpec("intercept"),
            TermSpec("smooth", ["x"], k=10, penalty_order=1),
            TermSpec("random_smooth", ["x"], by_factor="g", k=10,
                     penalty_order=1)])
        d = build_design(spec, data)
        assert d.n_lambda == 3
        assert d.N_p == 1 + 9 + 20 * 11  # k columns + constant per level

    def test_eeg_scale_coefficient_count(self):
        # per-series 20-column basis plus one constant: 21 coefficients per
        # series, 229,908 in total over 10,948 series
        rng = np.random.default_rng(1)
        n_series = 10948
        rows_per = 25
        n = n_series * rows_per
        data = {
            "t": rng.uniform(0.0, 1.0, n),
            "series": np.repeat([f"tr{i:05d}" for i in range(n_series)],
                                rows_per),
        }
        spec = ModelSpec([
            TermSpec("intercept"),
            TermSpec("random_smooth", ["t"], by_factor="series", k=20,
                     penalty_order=1)])
        d = build_design(spec, data)
        assert d.N_p - 1 == 229908
        assert d.n_lambda == 2

    def test_errors_identify_term(self):
        data, _ = table()
        with pytest.raises(SpecError, match="missing"):
            build_design(ModelSpec([TermSpec("smooth", ["missing"])]), data)
        bad = dict(data)
        bad["x"] = bad["x"].copy()
        bad["x"][0] = np.nan
        with pytest.raises(SpecError, match="non-finite"):
            build_design(ModelSpec([TermSpec("smooth", ["x"])]), bad)
        with pytest.raises(SpecError):
            build_design(ModelSpec([TermSpec("intercept")]),
                         {"x": np.zeros(0)})

    def test_roundtrip_prediction(self):
        data, rng = table()
        spec = ModelSpec([
            TermSpec("intercept"),
            TermSpec("linear", ["z"]),
            TermSpec("smooth", ["x"], k=8),
            TermSpec("factor_smooth", ["x"], by_factor="g", k=6),
            TermSpec("random_smooth", ["z"], by_factor="g", k=5,
                     penalty_order=1),
            TermSpec("random_intercept", by_factor="g")])
        d = build_design(spec, data)
        beta = rng.standard_normal(d.N_p)
        internal = np.asarray(d.X_full @ beta)
        pred = np.asarray(d.build_rows(data) @ beta)
        np.testing.assert_allclose(d.to_user(internal), pred, atol=1e-12)

    def test_factor_smooth_block_sparsity(self):
        # density of the factor-smooth block is bounded by 1/levels
        data, _ = table(n=2000)
        spec = ModelSpec([TermSpec("intercept"),
                          TermSpec("factor_smooth", ["x"], by_factor="g",
                                   k=10)])
        d = build_design(spec, data)
        t = [a for a in d.terms if a.spec.kind == "factor_smooth"][0]
        block = d.X_full[:, t.col_start:t.col_start + t.col_count]
        density = block.nnz / (block.shape[0] * block.shape[1])
        assert density <= 10 / (20 * 10) + 1e-12

    def test_lambda_sharing_under_level_permutation(self):
        # permuting factor levels leaves the set of embedded penalties
        # unchanged up to a symmetric permutation
        data, rng = table(n=300, levels=6)
        spec = ModelSpec([TermSpec("intercept"),
                          TermSpec("random_smooth", ["x"], by_factor="g",
                                   k=5, penalty_order=1)])
        d1 = build_design(spec, data)
        relabel = {f"s{i:02d}": f"s{5 - i:02d}" for i in range(6)}
        data2 = dict(data)
        data2["g"] = np.array([relabel[v] for v in data["g"]])
        d2 = build_design(spec, data2)
        assert d1.n_lambda == d2.n_lambda
        for r in range(d1.n_lambda):
            e1 = np.sort(np.linalg.eigvalsh(d1.S_emb(r).todense()))
            e2 = np.sort(np.linalg.eigvalsh(d2.S_emb(r).todense()))
            np.testing.assert_allclose(e1, e2, atol=1e-9)

    def test_unseen_level_rejected_in_prediction(self):
        data, _ = table(n=100, levels=4)
        spec = ModelSpec([TermSpec("random_intercept", by_factor="g"),
                          TermSpec("intercept")])
        d = build_design(spec, data)
        new = dict(data)
        new["g"] = np.array(["zz"] * 100)
        with pytest.raises(SpecError, match="unseen"):
            d.build_rows(new)


class TestEmbedPenalty:
    def test_identity_block(self):
        S = embed_penalty(PenaltyCore(np.eye(2), 0, 2), 1, 4)
        coords = set(zip(*S.nonzero()))
        assert coords == {(1, 1), (2, 2)}

    def test_quadratic_form_matches_dense(self):
        rng = np.random.default_rng(2)
        C = rng.standard_normal((4, 4))
        C = C @ C.T
        S = embed_penalty(PenaltyCore(C, 0, 4), 3, 10)
        beta = rng.standard_normal(10)
        assert abs(beta @ (S @ beta) - beta[3:7] @ C @ beta[3:7]) < 1e-12

    def test_zero_matrix(self):
        S = embed_penalty(PenaltyCore(np.zeros((3, 3)), 3, 0), 0, 5)
        assert S.nnz == 0

    def test_range_overflow(self):
        with pytest.raises(SpecError):
            embed_penalty(PenaltyCore(np.eye(3), 0, 3), 3, 5)


class TestBalancedPenalty:
    def _design(self):
        data, _ = table()
        spec = ModelSpec([TermSpec("intercept"),
                          TermSpec("smooth", ["x"], k=8),
                          TermSpec("smooth", ["z"], k=8)])
        return build_design(spec, data)

    def test_single_penalty_unit_norm(self):
        data, _ = table()
        d = build_design(ModelSpec([TermSpec("intercept"),
                                    TermSpec("smooth", ["x"], k=8)]), data)
        assert abs(sp.linalg.norm(balanced_penalty(d)) - 1.0) < 1e-12

    def test_matches_dense_accumulation(self):
        d = self._design()
        ref = sum(np.asarray(d.S_emb(r).todense())
                  / np.linalg.norm(np.asarray(d.S_emb(r).todense()))
                  for r in range(d.n_lambda))
        np.testing.assert_allclose(
            np.asarray(balanced_penalty(d).todense()), ref, atol=1e-12)


class TestPenaltyClusters:
    def test_single_penalty_trace(self):
        data, _ = table()
        d = build_design(ModelSpec([TermSpec("intercept"),
                                    TermSpec("smooth", ["x"], k=10,
                                             penalty_order=2)]), data)
        np.testing.assert_allclose(d.trace_sinv(np.array([2.0])), [4.0])

    def test_identity_penalty_trace(self):
        data, _ = table(levels=5)
        d = build_design(ModelSpec([TermSpec("intercept"),
                                    TermSpec("random_intercept",
                                             by_factor="g")]), data)
        np.testing.assert_allclose(d.trace_sinv(np.array([10.0])), [0.5])

    def test_overlapping_block_vs_pinv_oracle(self):
        data, rng = table()
        d = build_design(ModelSpec([TermSpec("intercept"),
                                    TermSpec("tensor", ["x", "z"],
                                             k=[5, 5])]), data)
        lams = np.array([0.7, 3.1])
        S = np.asarray(d.S_lambda(lams).todense())
        P = np.linalg.pinv(S)
        got = d.trace_sinv(lams)
        ref = [np.trace(P @ np.asarray(d.S_emb(r).todense()))
               for r in range(2)]
        np.testing.assert_allclose(got, ref, rtol=1e-8)
        # generalized log-determinant against the eigenvalue oracle
        ev = np.linalg.eigvalsh(S)
        ev = ev[ev > 1e-9 * ev[-1]]
        assert abs(d.logdet_S_plus(lams) - np.sum(np.log(ev))) < 1e-7
        # pair traces
        got_pair = d.trace_sinv_pair(lams)
        for j in range(2):
            for l in range(2):
                ref_jl = np.trace(P @ np.asarray(d.S_emb(j).todense())
                                  @ P @ np.asarray(d.S_emb(l).todense()))
                assert abs(got_pair[j, l] - ref_jl) <= 1e-8 * abs(ref_jl)

    def test_quad_forms_match_embedded(self):
        data, rng = table()
        spec = ModelSpec([TermSpec("intercept"),
                          TermSpec("smooth", ["x"], k=8),
                          TermSpec("random_smooth", ["z"], by_factor="g",
                                   k=5, penalty_order=1)])
        d = build_design(spec, data)
        beta = rng.standard_normal(d.N_p)
        q = d.quad_forms(beta)
        ref = [beta @ (d.S_emb(r) @ beta) for r in range(d.n_lambda)]
        np.testing.assert_allclose(q, ref, atol=1e-12)
