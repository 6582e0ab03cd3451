import math

import numpy as np
import pytest

from byzfl.aggregators import (
    AggregationContext,
    agg_cc,
    agg_clipped_clustering,
    agg_dnc,
    agg_geomed,
    agg_krum,
    agg_mean,
    agg_median,
    agg_signguard,
    agg_trimmed_mean,
    aggregate,
    apply_transforms,
    bucketing_wrap,
    check_aggregator,
    clip_update,
    dp_noise,
    dp_sigma,
    geomed_objective,
    krum_scores,
    registry,
    weiszfeld,
)
from byzfl.exceptions import ConfigurationError
from byzfl.numcore import UpdateSet
from byzfl.schemas import AggregatorConfig, TransformConfig


def U(rows, mask=None):
    return UpdateSet.from_rows(np.asarray(rows, dtype=float), mask)


def grid_geomed(points, levels=14, steps=11):
    """Nested grid search for the geometric median objective."""
    center = points.mean(axis=0)
    half = np.abs(points - center).max() + 1e-9
    best = geomed_objective(points, center)
    axis = np.linspace(-1.0, 1.0, steps)
    for _ in range(levels):
        mesh = np.stack(np.meshgrid(*[axis] * points.shape[1], indexing="ij"), axis=-1).reshape(-1, points.shape[1])
        candidates = center + half * mesh
        values = np.linalg.norm(candidates[:, None, :] - points[None, :, :], axis=2).sum(axis=1)
        i = int(np.argmin(values))
        if values[i] < best:
            best, center = float(values[i]), candidates[i]
        half *= 2.0 / (steps - 1) * 1.5
    return best


class TestClassicalRules:
    """Test mean, median, trimmed mean and their oracles"""

    def test_mean_and_median_small_inputs(self):
        """Small hand-checked inputs"""
        assert np.array_equal(agg_mean(U([[1, 2], [3, 4]])), [2, 3])
        assert np.array_equal(agg_median(U([[1], [2], [100]])), [2])
        assert np.array_equal(agg_median(U([[1], [2], [3], [100]])), [2.5])

    def test_median_matches_sort_oracle(self, gen):
        """Exact agreement with a sort-based median on 100 random 50×10 matrices"""
        for _ in range(100):
            m = gen.standard_normal((50, 10))
            s = np.sort(m, axis=0)
            assert np.array_equal(agg_median(U(m)), (s[24] + s[25]) / 2)

    def test_trimmed_mean_matches_sort_oracle(self, gen):
        """Exact agreement with a sort-and-slice oracle"""
        for _ in range(100):
            m = gen.standard_normal((50, 10))
            b = int(gen.integers(0, 25))
            s = np.sort(m, axis=0)
            assert np.array_equal(agg_trimmed_mean(U(m), b), s[b:50 - b].mean(axis=0))

    def test_trimmed_mean_small_input(self):
        """b=1 on {1,2,3,100} averages 2 and 3"""
        assert np.array_equal(agg_trimmed_mean(U([[1], [2], [3], [100]]), 1), [2.5])

    def test_trimmed_mean_zero_is_mean(self, gen):
        """b=0 reduces to the mean"""
        m = gen.standard_normal((9, 4))
        assert np.allclose(agg_trimmed_mean(U(m), 0), agg_mean(U(m)))

    def test_trimmed_mean_too_much_trimming(self):
        """2b >= n is a configuration error"""
        with pytest.raises(ConfigurationError):
            agg_trimmed_mean(U([[1], [2], [3], [4]]), 2)


class TestGeoMed:
    """Test the smoothed Weiszfeld geometric median"""

    def test_one_dimensional(self):
        """Geometric median of {1, 2, 100} is 2"""
        assert agg_geomed(U([[1], [2], [100]]))[0] == pytest.approx(2.0, abs=1e-5)

    def test_identical_rows(self):
        """All-equal input returns that row"""
        assert np.allclose(agg_geomed(U([[1.0, 2.0]] * 4)), [1.0, 2.0])

    def test_matches_grid_oracle(self, gen):
        """Objective within 1e-6 relative of a nested-grid oracle, with a vanishing subgradient"""
        for _ in range(20):
            points = gen.standard_normal((10, 3))
            result = weiszfeld(points, max_iters=2000, eps=1e-10)
            ours = geomed_objective(points, result.point)
            assert ours <= grid_geomed(points) * (1 + 1e-6)
            diff = result.point - points
            grad = (diff / np.linalg.norm(diff, axis=1)[:, None]).sum(axis=0)
            assert np.linalg.norm(grad) <= 1e-4

    def test_objective_monotone(self, gen):
        """Weiszfeld objective never increases"""
        for _ in range(20):
            objectives = weiszfeld(gen.standard_normal((10, 3)), max_iters=200, eps=1e-10).objectives
            assert all(b <= a * (1 + 1e-12) for a, b in zip(objectives, objectives[1:]))


class TestKrum:
    """Test Krum against a brute-force oracle"""

    @staticmethod
    def brute_force(rows, f):
        n = rows.shape[0]
        scores = []
        for i in range(n):
            d = sorted(float(((rows[i] - rows[j]) ** 2).sum()) for j in range(n) if j != i)
            scores.append(sum(d[: n - f - 2]))
        return np.array(scores)

    def test_matches_oracle(self, gen):
        """Scores and selected index agree on 50 random 8×4 instances (f=2)"""
        for _ in range(50):
            rows = gen.standard_normal((8, 4))
            expected = self.brute_force(rows, 2)
            assert np.allclose(krum_scores(rows, 2), expected)
            assert np.array_equal(agg_krum(U(rows), 2), rows[int(np.argmin(expected))])

    def test_outlier_never_selected(self):
        """Three identical rows beat an outlier"""
        out = agg_krum(U([[0.0, 0.0]] * 3 + [[100.0, 100.0]] + [[0.1, 0.0]]), 1)
        assert np.array_equal(out, [0.0, 0.0])

    def test_small_n_warns_but_runs(self, caplog):
        """n < f+3 clamps the neighbour count"""
        out = agg_krum(U([[0.0], [1.0], [5.0]]), 2)
        assert out.shape == (1,)
        assert "krum" in caplog.text


class TestBreakdown:
    """One huge row drags the mean but not the robust rules"""

    @pytest.mark.parametrize("G", [1e3, 1e6, 1e9])
    def test_single_outlier(self, gen, G):
        """‖mean‖ grows with G while robust outputs stay inside norm 2"""
        benign = gen.standard_normal((20, 5))
        benign /= np.maximum(1.0, np.linalg.norm(benign, axis=1))[:, None]
        direction = np.ones(5) / np.sqrt(5)
        u = U(np.vstack([benign, G * direction]), [False] * 20 + [True])

        mean_norm = np.linalg.norm(agg_mean(u))
        assert mean_norm == pytest.approx(G / 21, rel=0.1)
        for out in (agg_median(u), agg_trimmed_mean(u, 1), agg_geomed(u), agg_krum(u, 1)):
            assert np.linalg.norm(out) <= 2.0


class TestCenteredClipping:
    """Test centered clipping"""

    def test_huge_tau_is_mean(self, gen):
        """τ → ∞, one iteration from 0 equals the mean"""
        m = gen.standard_normal((6, 3))
        assert np.allclose(agg_cc(U(m), 1e12, 1, np.zeros(3)), agg_mean(U(m)))

    def test_identical_rows_converge(self):
        """Identical rows at distance ≤ τ from v0 return that row"""
        assert np.allclose(agg_cc(U([[1.0, 1.0]] * 4), 10.0, 1, np.zeros(2)), [1.0, 1.0])

    def test_outlier_moves_at_most_tau_over_n(self):
        """An outlier's pull is bounded by τ/n per iteration"""
        u = U([[0.0]] * 9 + [[1e6]])
        assert agg_cc(u, 1.0, 1, np.zeros(1))[0] == pytest.approx(0.1)


class TestDnC:
    """Test divide-and-conquer filtering"""

    def test_removes_far_outlier(self, rng, gen):
        """The outlier is filtered so the output stays near the benign mean"""
        benign = gen.standard_normal((9, 20)) * 0.1
        u = U(np.vstack([benign, np.full(20, 1e6)]))
        out = agg_dnc(u, niters=1, sub_dim=20, c=1.0, f=1, rng=rng)
        assert np.allclose(out, benign.mean(axis=0))

    def test_too_many_removed(self, rng):
        """floor(c·f) >= n is rejected"""
        with pytest.raises(ConfigurationError):
            agg_dnc(U([[0.0], [1.0]]), 1, 1, 1.0, 2, rng)

    def test_deterministic(self, rng, gen):
        """Same stream, same output"""
        u = U(gen.standard_normal((10, 30)))
        a = agg_dnc(u, 3, 10, 1.0, 2, rng)
        b = agg_dnc(u, 3, 10, 1.0, 2, rng)
        assert np.array_equal(a, b)


class TestClippedClustering:
    """Test median-norm clipping plus average-linkage clustering"""

    def test_clips_to_median_norm(self):
        """Norms {1, 2, 9} along one direction: τ = 2, output averages 1, 2, 2"""
        direction = np.array([0.6, 0.8])
        out = agg_clipped_clustering(U([direction * 1, direction * 2, direction * 9]))
        assert np.allclose(out, direction * 5 / 3)

    def test_drops_opposite_minority(self, gen):
        """Flipped rows land in the smaller cluster"""
        base = np.array([1.0, 1.0, 0.0])
        benign = base + 0.05 * gen.standard_normal((7, 3))
        u = U(np.vstack([benign, -base, -base]))
        out = agg_clipped_clustering(u)
        assert out @ base > 0
        assert np.linalg.norm(out - benign.mean(axis=0)) < 0.2

    def test_identical_rows(self):
        """All-equal rows return that row"""
        assert np.allclose(agg_clipped_clustering(U([[1.0, -1.0]] * 5)), [1.0, -1.0])


class TestSignGuard:
    """Test the norm filter and sign clustering"""

    def test_excludes_large_norm(self, rng, gen):
        """A row 100× the median norm is dropped"""
        benign = np.abs(gen.standard_normal((9, 20))) + 0.5
        u = U(np.vstack([benign, 100 * benign[0]]))
        out = agg_signguard(u, 0.1, 3.0, 1.0, rng)
        assert np.linalg.norm(out) <= np.median(np.linalg.norm(u.rows, axis=1)) + 1e-9
        assert np.all(out > 0)

    def test_sign_flipped_rows_separated(self, rng, gen):
        """Rows with opposite sign statistics are clustered away"""
        benign = np.abs(gen.standard_normal((8, 40))) + 0.1
        flipped = -np.abs(gen.standard_normal((3, 40))) - 0.1
        out = agg_signguard(U(np.vstack([benign, flipped])), 0.1, 3.0, 1.0, rng)
        assert np.all(out > 0)

    def test_identical_rows(self, rng):
        """All-equal rows return that row"""
        assert np.allclose(agg_signguard(U([[1.0, 2.0, -3.0]] * 6), 0.1, 3.0, 1.0, rng), [1.0, 2.0, -3.0])


class TestBucketing:
    """Test the Bucketing wrapper"""

    def test_single_bucket_is_mean(self, rng, gen):
        """s = n averages everything regardless of the base rule"""
        m = gen.standard_normal((6, 2))
        out = bucketing_wrap(U(m), 6, AggregatorConfig(type="krum"), rng)
        assert np.allclose(out, m.mean(axis=0))

    def test_bucket_size_one_is_base(self, rng, gen):
        """s = 1 only permutes rows, so median is unchanged"""
        m = gen.standard_normal((7, 3))
        assert np.allclose(bucketing_wrap(U(m), 1, AggregatorConfig(type="median"), rng), agg_median(U(m)))

    def test_dispatch_through_config(self, rng, gen):
        """aggregate() routes bucketing before the base rule"""
        m = gen.standard_normal((8, 3))
        ctx = AggregationContext(rng=rng)
        out = aggregate(U(m), AggregatorConfig(type="median", bucketing=8), ctx)
        assert np.allclose(out, m.mean(axis=0))

    def test_default_trim_clamped_to_bucket_count(self, rng, gen, caplog):
        """K=10, s=3 leaves 4 bucket means, so b=M=2 is lowered to 1"""
        m = gen.standard_normal((10, 3))
        ctx = AggregationContext(rng=rng, assumed_f=2)
        out = aggregate(U(m), AggregatorConfig(type="trimmed_mean", bucketing=3), ctx)
        assert out.shape == (3,)
        assert "bucketing" in caplog.text

    def test_check_accepts_clamped_default(self):
        """The up-front check applies the same clamp"""
        check_aggregator(AggregatorConfig(type="trimmed_mean", bucketing=3), 10, 2)

    def test_check_rejects_explicit_trim(self):
        """An explicit b that 4 bucket means cannot satisfy is rejected"""
        with pytest.raises(ConfigurationError) as exc:
            check_aggregator(AggregatorConfig(type="trimmed_mean", b=2, bucketing=3), 10, 2)
        assert exc.value.field_path == "server_config.aggregator.b"

    def test_check_rejects_dnc_removing_everything(self):
        """floor(c·f) >= n fails before any round"""
        with pytest.raises(ConfigurationError):
            check_aggregator(AggregatorConfig(type="dnc", f=3, c=2.0), 5, 0)


class TestPermutationInvariance:
    """Reordering rows does not change rules without randomness"""

    @pytest.mark.parametrize("kind", ["mean", "median", "trimmed_mean", "geomed", "cc"])
    def test_shuffled_rows(self, rng, gen, kind):
        """Output agrees on 10 random permutations"""
        m = gen.standard_normal((11, 4))
        cfg = AggregatorConfig(type=kind, b=2, tau=1.0, eps=1e-10, max_iters=1000)
        ctx = AggregationContext(rng=rng, v0=np.zeros(4))
        expected = aggregate(U(m), cfg, ctx)
        for _ in range(10):
            shuffled = m[gen.permutation(11)]
            assert np.allclose(aggregate(U(shuffled), cfg, ctx), expected, rtol=0, atol=1e-6)


class TestDispatcher:
    """Test config-driven aggregation"""

    @pytest.mark.parametrize(
        "kind", ["mean", "median", "trimmed_mean", "geomed", "krum", "cc", "dnc", "clipped_clustering", "signguard"]
    )
    def test_every_rule_accepts_identical_rows(self, rng, kind):
        """Identical rows are a fixed point of every rule (CC starting from that row)"""
        row = np.array([0.5, -1.0, 2.0])
        ctx = AggregationContext(rng=rng, assumed_f=1, v0=row)
        assert np.allclose(aggregate(U([row] * 7), AggregatorConfig(type=kind), ctx), row)

    def test_b_defaults_to_assumed_f(self, rng):
        """trimmed_mean without b trims M from each side"""
        u = U([[1], [2], [3], [100], [-100]])
        out = aggregate(u, AggregatorConfig(type="trimmed_mean"), AggregationContext(rng=rng, assumed_f=1))
        assert np.array_equal(out, [2.0])

    def test_registry_annotations(self):
        """Every rule is listed with a characteristic"""
        names = {name: kind for name, _, kind in registry()}
        assert names["median"] == "dimension-wise"
        assert names["clipped_clustering"] == "cosine"
        assert len(names) == 9


class TestTransforms:
    """Test norm clipping and the DP Gaussian mechanism"""

    def test_clip(self):
        """Long updates are scaled to τ, short and zero ones pass through"""
        assert np.allclose(clip_update(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
        assert np.array_equal(clip_update(np.array([0.3, 0.4]), 1.0), [0.3, 0.4])
        assert np.array_equal(clip_update(np.zeros(2), 1.0), [0.0, 0.0])

    def test_dp_sigma_formula(self, gen):
        """s = 2G√(2 ln(1.25/δ))/(bε) to 1e-12 relative"""
        for _ in range(10):
            eps, delta, g, b = gen.uniform(0.1, 10), gen.uniform(1e-6, 0.5), gen.uniform(0.1, 5), int(gen.integers(1, 256))
            expected = 2 * g * math.sqrt(2 * math.log(1.25 / delta)) / (b * eps)
            assert dp_sigma(eps, delta, g, b) == pytest.approx(expected, rel=1e-12)

    def test_dp_sigma_value(self):
        """ε=1, δ=1e-5, G=1, b=1"""
        assert dp_sigma(1.0, 1e-5, 1.0, 1) == pytest.approx(2 * math.sqrt(2 * math.log(1.25e5)), rel=1e-12)

    def test_dp_empirical_std(self, rng):
        """Noise std over 10⁶ draws is within 1% of s"""
        cfg = TransformConfig(clip_tau=1.0, dp={"epsilon": 1.0, "delta": 1e-5, "g_max": 1.0, "batch_b": 64})
        noisy = dp_noise(np.zeros(1_000_000), cfg, rng)
        s = dp_sigma(1.0, 1e-5, 1.0, 64)
        assert abs(noisy.std() / s - 1) < 0.01

    def test_dp_bad_delta(self):
        """δ must lie in (0, 1)"""
        with pytest.raises(ConfigurationError):
            dp_sigma(1.0, 1.0, 1.0, 1)

    def test_dp_requires_clipping(self):
        """A DP block without clip_tau is rejected by the schema"""
        with pytest.raises(ValueError):
            TransformConfig(dp={"epsilon": 1.0, "delta": 1e-5, "g_max": 1.0})

    def test_apply_transforms_clips_first(self, rng):
        """Clip only, when no DP is configured"""
        out = apply_transforms(np.array([3.0, 4.0]), TransformConfig(clip_tau=5.0 / 2), rng)
        assert np.linalg.norm(out) == pytest.approx(2.5)
