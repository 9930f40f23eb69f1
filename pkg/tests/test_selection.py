import numpy as np
import pytest

import ivclust as ic
from oracles import grouped_dgp


def grouped_dataset(seed, n, sizes, offsets, noise=1.0):
    y, d, Z, _ = grouped_dgp(np.random.default_rng(seed), n, sizes, offsets, noise=noise)
    return ic.Dataset(y=y, D=d, Z=Z)


class TestLargestFamily:
    def test_unique_maximum(self, config):
        ds = grouped_dataset(0, 4000, (3, 2, 1), (0.0, 3.0, 7.0))
        estimates = ic.just_identified_all(ds, config)
        dg = ic.ward_merge_path(np.array([e.beta for e in estimates]))
        fs = ic.largest_family(dg.partition_at(3), estimates, ds, config)
        assert set(fs.valid_ivs) == {0, 1, 2}
        assert set(fs.invalid_ivs) == {3, 4, 5}
        assert len(fs.cluster_members) == 3

    def test_equal_sizes_tie_broken_by_sargan_then_lexicographic(self, config):
        # two singleton-IV clusters of equal size and IV count: the tie
        # falls through to the smaller Sargan statistic (here both df=0,
        # statistic 0) and then to the lexicographic rule
        ds = grouped_dataset(1, 2000, (1, 1, 2), (0.0, 5.0, 10.0))
        estimates = ic.just_identified_all(ds, config)
        partition = ((0,), (1,), (2, 3))
        fs = ic.largest_family(partition, estimates, ds, config)
        assert fs.valid_ivs == (2, 3)
        partition = ((0,), (1,))
        fs = ic.largest_family(partition, ic.just_identified_all(ds, config)[:2], ds, config)
        assert fs.valid_ivs == (0,)

    def test_p2_tie_more_ivs_wins(self):
        # synthetic partition for P=2: equal cluster sizes, families with
        # 4 and 3 distinct instruments
        ds = grouped_dataset(3, 3000, (4, 3), (0.0, 4.0))
        cfg = ic.SelectionConfig()
        P2 = ic.Dataset(
            y=ds.y,
            D=np.column_stack([ds.D[:, 0], ds.Z @ np.full(7, 0.3) + ds.D[:, 0]]),
            Z=ds.Z,
        )
        estimates = ic.just_identified_all(P2, cfg)
        combos = [e.combo.indices for e in estimates]
        four = [i for i, c in enumerate(combos) if set(c) <= {0, 1, 2, 3}][:3]
        three = [i for i, c in enumerate(combos) if set(c) <= {4, 5, 6}][:3]
        fs = ic.largest_family((tuple(four), tuple(three)), estimates, P2, cfg)
        assert len(fs.cluster_members) == 3
        assert len(fs.valid_ivs) == 4

    def test_appendix_style_p2_scenario(self, config):
        # four instruments, two regressors, instrument 0 invalid: at K=2
        # the largest cluster is the family of the three valid instruments.
        # The first stage is fixed so the three contaminated estimates land
        # near each other but far from the valid family.
        rng = np.random.default_rng(4)
        n = 50000
        Z = rng.standard_normal((n, 4))
        gamma = np.array([[1.0, 0.0], [0.4, 1.0], [0.5, 1.0], [0.6, 1.0]])
        chol = np.linalg.cholesky(
            np.array([[1.0, 0.25, 0.25], [0.25, 1.0, 0.0], [0.25, 0.0, 1.0]])
        )
        errs = rng.standard_normal((n, 3)) @ chol.T
        D = Z @ gamma + errs[:, 1:]
        alpha = np.array([4.0, 0.0, 0.0, 0.0])
        y = Z @ alpha + errs[:, 0]
        ds = ic.Dataset(y=y, D=D, Z=Z)
        estimates = ic.just_identified_all(ds, config)
        dg = ic.ward_merge_path(np.array([e.beta for e in estimates]))
        fs = ic.largest_family(dg.partition_at(2), estimates, ds, config)
        assert set(fs.valid_ivs) == {1, 2, 3}
        assert {c.indices for c in fs.family} == {(1, 2), (1, 3), (2, 3)}


class TestDownwardTest:
    def test_all_valid_stops_at_one(self, config):
        ds = grouped_dataset(5, 2000, (21,), (0.0,))
        res = ic.select_valid(ds, config)
        assert res.stop_K == 1
        assert res.valid == tuple(range(21))
        assert res.invalid == ()
        assert not res.all_rejected

    def test_three_groups_picks_largest(self, config):
        ds = grouped_dataset(6, 20000, (5, 4, 3), (0.0, 3.0, 6.0))
        res = ic.select_valid(ds, config)
        assert set(res.valid) == set(range(5))
        assert not res.all_rejected

    def test_path_prefix_property(self, config):
        ds = grouped_dataset(7, 4000, (6, 4, 2), (0.0, 4.0, 8.0))
        res = ic.select_valid(ds, config)
        assert [fs.K for fs in res.path] == list(range(1, res.stop_K + 1))
        assert res.path[-1].sargan.passed
        assert all(not fs.sargan.passed for fs in res.path[:-1])

    def test_monotone_threshold(self):
        ds = grouped_dataset(8, 3000, (5, 4), (0.0, 2.5))
        stop_small_alpha = ic.select_valid(ds, ic.SelectionConfig(alpha=1e-4)).stop_K
        stop_large_alpha = ic.select_valid(ds, ic.SelectionConfig(alpha=0.2)).stop_K
        assert stop_small_alpha <= stop_large_alpha

    def test_all_rejected_flagged(self, config):
        # three instruments with three far-apart effects: no candidate can
        # pass, the best p-value model is returned flagged
        ds = grouped_dataset(9, 5000, (1, 1, 1), (0.0, 8.0, 16.0))
        res = ic.select_valid(ds, config)
        assert res.all_rejected
        assert len(res.path) == 2  # K runs to n_leaves - 1
        best_p = max(fs.sargan.p_value for fs in res.path)
        assert res.path[res.stop_K - 1].sargan.p_value == best_p
        assert res.fit is not None

    def test_p1_family_is_leaf_ivs(self, config):
        ds = grouped_dataset(10, 3000, (5, 3), (0.0, 3.0))
        estimates = ic.just_identified_all(ds, config)
        dg = ic.ward_merge_path(np.array([e.beta for e in estimates]))
        for K in range(1, 7):
            fs = ic.largest_family(dg.partition_at(K), estimates, ds, config)
            leaf_ivs = {estimates[i].combo.indices[0] for i in fs.cluster_members}
            assert set(fs.valid_ivs) == leaf_ivs


class TestSelectValid:
    def test_requires_valid_dataset(self, config):
        rng = np.random.default_rng(11)
        ds = ic.Dataset(
            y=rng.standard_normal(5),
            D=rng.standard_normal(5),
            Z=rng.standard_normal((5, 3)),
        )
        with pytest.raises(ic.InvalidDatasetError):
            ic.select_valid(ds, config)

    def test_column_permutation_equivariant(self, config):
        design = ic.design_by_name("strong_p1", n=2000)
        ds = ic.generate(design, np.random.default_rng(12))
        res = ic.select_valid(ds, config)
        perm = np.random.default_rng(13).permutation(21)
        ds_p = ic.Dataset(y=ds.y, D=ds.D, Z=ds.Z[:, perm])
        res_p = ic.select_valid(ds_p, config)
        # column j of the permuted data is original column perm[j]
        mapped = {int(perm[j]) for j in res_p.valid}
        assert mapped == set(res.valid)

    def test_controls_partialled_before_selection(self, config):
        design = ic.design_by_name("strong_p1", n=2000)
        ds = ic.generate(design, np.random.default_rng(14))
        W = np.random.default_rng(15).standard_normal((ds.n, 2))
        shifted = ic.Dataset(
            y=ds.y + W @ [1.0, -2.0], D=ds.D, Z=ds.Z, W=W, intercept=True
        )
        res_plain = ic.select_valid(ds, config)
        res_ctrl = ic.select_valid(shifted, config)
        assert set(res_ctrl.valid) == set(res_plain.valid)

    def test_noiseless_exact_oracle(self, config):
        ds = grouped_dataset(16, 600, (5, 3, 2), (0.0, 3.0, 6.0), noise=0.0)
        res = ic.select_valid(ds, config)
        assert res.valid == tuple(range(5))
        assert not res.all_rejected

    def test_strong_design_aggregates(self, strong_p1_report):
        ahc = strong_p1_report.metrics["ahc"]
        assert abs(ahc["n_invalid"] - 12) <= 0.3
        assert ahc["p_allinv"] >= 0.98


class TestLateGroups:
    def test_homogeneous_single_group(self, config):
        ds = grouped_dataset(17, 2000, (8,), (0.0,))
        res = ic.late_groups(ds, config)
        assert res.K == 1
        assert len(res.groups) == 1
        assert res.groups[0].iv_indices == tuple(range(8))

    def test_two_groups_recovered(self, config):
        ds = grouped_dataset(18, 5000, (6, 3), (0.0, 1.0))
        res = ic.late_groups(ds, config)
        assert res.K == 2
        centers = sorted(float(g.center[0]) for g in res.groups)
        assert abs(centers[0] - 0.0) < 0.05
        assert abs(centers[1] - 1.0) < 0.05
        sizes = sorted(len(g.iv_indices) for g in res.groups)
        assert sizes == [3, 6]

    def test_tied_groups_both_reported(self, config):
        ds = grouped_dataset(19, 6000, (4, 4), (0.0, 2.0))
        res = ic.late_groups(ds, config)
        assert res.K == 2
        assert sorted(len(g.iv_indices) for g in res.groups) == [4, 4]

    def test_groups_partition_candidates(self, config):
        ds = grouped_dataset(20, 5000, (5, 4, 3), (0.0, 2.0, 4.0))
        res = ic.late_groups(ds, config)
        seen = sorted(i for g in res.groups for i in g.iv_indices)
        assert seen == list(range(12))
        for g in res.groups:
            assert g.sargan.passed


class TestUnionCI:
    def test_single_valid_equals_own_ci(self, config):
        from scipy import stats

        ds = grouped_dataset(21, 4000, (5, 3), (0.0, 4.0))
        res = ic.select_valid(ds, config)
        box = ic.plausibly_exogenous_union_ci(ds, config, 0.05)
        assert box.shape == (1, 2)
        fits = [ic.post_selection_tsls(ds, (j,)) for j in res.valid]
        z = stats.norm.ppf(0.975)
        lo = min(f.beta[0] - z * f.se[0] for f in fits)
        hi = max(f.beta[0] + z * f.se[0] for f in fits)
        np.testing.assert_allclose(box[0], [lo, hi], rtol=1e-10)

    def test_covers_truth_all_valid(self, config):
        design = ic.design_by_name("strong_p1", n=2000)
        covered = 0
        reps = 200
        for ss in np.random.SeedSequence(22).spawn(reps):
            ds = ic.generate(design, np.random.default_rng(ss))
            box = ic.plausibly_exogenous_union_ci(ds, config, 0.05)
            covered += box[0, 0] <= 0.0 <= box[0, 1]
        assert covered / reps >= 0.95

    def test_mild_violation_widens_but_finite(self, config):
        # same noise draw with and without a local-to-zero violation on one
        # selected instrument: the union interval widens yet stays finite
        n = 4000
        y, d, Z, _ = grouped_dgp(np.random.default_rng(23), n, (6, 3), (0.0, 5.0))
        clean = ic.Dataset(y=y, D=d, Z=Z)
        extra = 2.0 / np.sqrt(n)
        mild = ic.Dataset(y=y + Z[:, 0] * extra, D=d, Z=Z)
        box_clean = ic.plausibly_exogenous_union_ci(clean, config, 0.05)
        box_mild = ic.plausibly_exogenous_union_ci(mild, config, 0.05)
        w_clean = float(box_clean[0, 1] - box_clean[0, 0])
        w_mild = float(box_mild[0, 1] - box_mild[0, 0])
        assert np.isfinite(w_mild)
        assert w_mild > w_clean

    def test_level_validated(self, config):
        ds = grouped_dataset(24, 2000, (4, 2), (0.0, 3.0))
        with pytest.raises(ValueError):
            ic.plausibly_exogenous_union_ci(ds, config, 1.5)
