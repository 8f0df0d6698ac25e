import numpy as np
import pytest
from scipy import stats

from peertruth.forest import ForestConfig
from peertruth.mechanism import REPORT_LABELS, ScoreParams, keyed_rng
from peertruth.simulation import (
    AUGMENTED,
    ORIGINAL,
    QUADRATIC,
    WorldConfig,
    assign_strategies,
    augmented_scores,
    check_self_predicting,
    constant,
    convergence_curve,
    default_world,
    descriptor_map,
    generate_world,
    make_reports,
    noisy_truthful,
    original_scores,
    pages_world,
    peer_conditional,
    posterior_success,
    quadratic_scores,
    rating_quality_correlation,
    report_distribution,
    run_experiment,
    symmetric_confusion,
    truthful,
    uniform_random,
)
from peertruth.variants import augmented_score, quadratic_accuracy

PAGES_RULE = {"numeric": "pages", "threshold": 20.0, "below": "s", "above": "e"}


def binary_world(diagonal):
    return WorldConfig(labels=("a", "b"), prior=(0.5, 0.5), confusion=symmetric_confusion(2, diagonal))


class TestSelfPredicting:
    def test_binary_closed_form(self):
        cfg = binary_world(0.8)
        cond = peer_conditional(np.array(cfg.prior), np.array(cfg.confusion))
        assert cond[0, 0] == pytest.approx(0.68)
        assert cond[1, 0] == pytest.approx(0.32)
        report = check_self_predicting(cfg)
        assert report.margins == pytest.approx([0.36, 0.36])
        assert report.holds

    def test_identity_limit(self):
        delta = 1e-6
        cfg = WorldConfig(prior=(0.2, 0.3, 0.5), confusion=symmetric_confusion(3, 1 - delta))
        margins = check_self_predicting(cfg).margins
        assert np.all(margins > 1 - 4 * delta) and np.all(margins < 1)

    def test_uniform_confusion_fails(self):
        cfg = WorldConfig(confusion=tuple((1 / 3,) * 3 for _ in range(3)))
        report = check_self_predicting(cfg)
        assert report.margins == pytest.approx([0, 0, 0], abs=1e-12)
        assert not report.holds

    def test_default_world_holds_in_every_cell(self):
        report = check_self_predicting(default_world())
        assert report.holds
        assert len(report.cell_margins) == 9
        assert report.margins == pytest.approx([0.3025] * 3)

    def test_cell_prior_shifts_margins(self):
        report = check_self_predicting(default_world())
        assert not np.allclose(report.cell_margins[(0, 0)], report.margins)


class TestGenerateWorld:
    def test_deterministic(self):
        cfg = default_world(n_items=50)
        a, b = generate_world(cfg), generate_world(cfg)
        for name in ("states", "categorical", "raters", "signals", "outcomes"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_state_frequencies_match_prior(self):
        prior = (0.2, 0.3, 0.5)
        world = generate_world(default_world(prior=prior, n_items=10_000, seed=4))
        observed = np.bincount(world.states, minlength=3)
        assert stats.chisquare(observed, np.array(prior) * 10_000).pvalue > 0.01

    def test_point_mass(self):
        cfg = default_world(prior=(1.0, 0.0, 0.0), n_items=200)
        assert not cfg.fully_mixed
        assert np.all(generate_world(cfg).states == 0)

    def test_signal_frequencies_match_confusion(self):
        world = generate_world(default_world(n_items=6000, seed=2))
        for t in range(3):
            sig = world.signals[world.states == t].ravel()
            freq = np.bincount(sig, minlength=3) / len(sig)
            assert freq == pytest.approx(default_world().confusion[t], abs=0.02)

    def test_distinct_raters_per_item(self):
        world = generate_world(default_world(n_items=100))
        assert all(len(set(row)) == 5 for row in world.raters)

    def test_numeric_feature(self):
        world = generate_world(pages_world(n_items=3000))
        means = [world.numeric[world.states == t, 0].mean() for t in range(3)]
        assert means == pytest.approx([10, 20, 30], abs=0.7)

    @pytest.mark.parametrize("bad", [
        {"prior": (0.5, 0.6, -0.1)},
        {"confusion": ((1.0, 0.0), (0.0, 1.0), (0.5, 0.5))},
        {"n_raters": 3},
        {"numeric_std": (1.0,)},
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            default_world(**bad)

    def test_dict_roundtrip(self):
        cfg = pages_world(n_items=77)
        assert WorldConfig.from_dict(cfg.to_dict()) == cfg


class TestAnalytic:
    def test_state_posterior_brute_force(self):
        cfg = pages_world()
        from peertruth.simulation import state_posterior

        post = state_posterior(cfg, np.array([[23.0]]), np.array([[2, 1]]))[0]
        prior = np.array(cfg.prior)
        like = np.array([
            cfg.categorical[0][t][2] * cfg.categorical[1][t][1] * stats.norm.pdf(23.0, cfg.numeric_means[0][t], 6.0)
            for t in range(3)
        ])
        assert post == pytest.approx(prior * like / (prior * like).sum())

    def test_report_distribution_rows_sum_to_one(self):
        cfg = default_world()
        q = report_distribution(cfg, np.zeros((9, 0)), np.array([[a, b] for a in range(3) for b in range(3)]))
        assert q.sum(axis=1) == pytest.approx(np.ones(9))

    def test_posterior_success(self):
        cfg = default_world()
        p = posterior_success(cfg, np.zeros((1, 0)), np.array([[0, 0]]), np.array([[2]]))[0, 0]
        from peertruth.simulation import state_posterior

        prior = state_posterior(cfg, np.zeros((1, 0)), np.array([[0, 0]]))[0]
        joint = prior * np.array(cfg.confusion)[:, 2]
        assert p == pytest.approx(joint @ np.array(cfg.success_prob) / joint.sum())


class TestStrategies:
    def test_apportionment(self):
        owner = assign_strategies([(truthful(), 1), (noisy_truthful(0.5), 1), (constant("e"), 2)], 50)
        assert np.bincount(owner).tolist() == [13, 12, 25]

    def test_descriptor_map_must_be_total(self):
        with pytest.raises(ValueError):
            descriptor_map({"categorical": 0, "map": ["s", "e"]}).validate_for(default_world())

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            constant("x").validate_for(default_world())

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            noisy_truthful(1.5)

    def test_threshold_reports(self):
        cfg = pages_world(n_items=400)
        world = generate_world(cfg)
        reports, _ = make_reports(world, [(descriptor_map(PAGES_RULE), 1)], keyed_rng(0))
        expected = np.where(world.numeric[:, 0] > 20, 2, 1)
        assert np.array_equal(reports, np.repeat(expected[:, None], 5, axis=1))

    def test_noisy_flip_rate(self):
        world = generate_world(default_world(n_items=4000))
        reports, _ = make_reports(world, [(noisy_truthful(0.3), 1)], keyed_rng(1))
        # a flip lands on the true signal one time in three
        assert np.mean(reports != world.signals) == pytest.approx(0.3 * 2 / 3, abs=0.01)

    def test_titles(self):
        assert noisy_truthful(0.25).title == "noisy_truthful(0.25)"
        assert constant("e").title == "constant(e)"
        assert descriptor_map(PAGES_RULE).title == "descriptor_map(pages>20?e:s)"
        assert uniform_random().title == "uniform_random"


class TestBatchScorers:
    def test_augmented_matches_scalar(self):
        rng = np.random.default_rng(0)
        reports = rng.integers(3, size=(20, 4))
        q = rng.dirichlet(np.ones(3), size=20)
        batch = augmented_scores(reports, q, alpha=2.0)
        for k in range(20):
            q_tilde = np.maximum(q[k], 0.05)
            for j in range(4):
                peers = [REPORT_LABELS[reports[k, i]] for i in range(4) if i != j]
                vals = [augmented_score(REPORT_LABELS[reports[k, j]], p, q_tilde, REPORT_LABELS, 2.0).value for p in peers]
                assert batch[k, j] == pytest.approx(np.mean(vals))

    def test_quadratic_matches_scalar(self):
        rng = np.random.default_rng(1)
        p = rng.random((10, 3))
        o = rng.integers(2, size=10)
        batch = quadratic_scores(p, o)
        for k in range(10):
            for j in range(3):
                p_b = np.mean([p[k, i] for i in range(3) if i != j])
                assert batch[k, j] == pytest.approx(quadratic_accuracy(p[k, j], p_b, int(o[k])))
        assert quadratic_scores(p, o, "constant")[0, 0] == pytest.approx(quadratic_accuracy(p[0, 0], 0.5, int(o[0])))

    def test_constant_exactly_zero(self):
        reports = np.full((30, 5), 2)
        scores = original_scores(reports, ScoreParams(), np.random.default_rng(0))
        assert np.all(scores == 0.0)

    def test_batch_agrees_with_reference(self):
        cfg = default_world(n_items=120)
        pop = [(truthful(), 1), (noisy_truthful(0.5), 1)]
        fast = run_experiment(cfg, pop, replications=40, seed=7)
        slow = run_experiment(cfg, pop, replications=8, seed=7, engine="reference")
        for name in fast.results:
            a, b = fast.results[name], slow.results[name]
            z = (a.mean - b.mean) / np.hypot(a.stderr, b.stderr)
            assert abs(z) < 3.5, (name, a.mean, b.mean)

    def test_large_corpus_sampling_path(self):
        # 3000 items exceeds the dense-key budget and takes the rejection path
        reports = np.random.default_rng(3).integers(3, size=(3000, 5))
        scores = original_scores(reports, ScoreParams(), np.random.default_rng(4))
        assert scores.shape == (3000, 5) and np.all(np.isfinite(scores))
        assert np.all(scores >= -1.0)


class TestExperiments:
    def test_truthful_positive(self):
        result = run_experiment(default_world(), [(truthful(), 1)], replications=20)
        lo, hi = result.results["truthful"].ci()
        assert lo > 0
        assert result.results["truthful"].count == 20

    def test_constant_scores_exactly_zero(self):
        result = run_experiment(default_world(n_items=100), [(constant("e"), 1)], replications=5, keep_scores=True)
        assert all(np.all(s == 0.0) for s in result.scores)
        assert result.results["constant(e)"].mean == 0.0

    def test_truthful_beats_noise(self):
        result = run_experiment(default_world(), [(truthful(), 1), (noisy_truthful(0.5), 1)], replications=20)
        t, n = result.results["truthful"], result.results["noisy_truthful(0.5)"]
        assert t.ci()[0] > n.ci()[1]

    def test_seed_determinism(self):
        pop = [(truthful(), 1), (noisy_truthful(0.25), 1)]
        a = run_experiment(default_world(n_items=80), pop, replications=4, seed=5)
        b = run_experiment(default_world(n_items=80), pop, replications=4, seed=5)
        assert a.rows() == b.rows()

    def test_requires_self_predicting(self):
        cfg = default_world(confusion=tuple((1 / 3,) * 3 for _ in range(3)))
        with pytest.raises(ValueError):
            run_experiment(cfg, [(truthful(), 1)], replications=1)

    def test_quadratic_truthful_beats_constant_forecast(self):
        pop = [(truthful(), 1), (constant("s"), 1)]
        result = run_experiment(default_world(), pop, mechanism=QUADRATIC, replications=10)
        assert result.results["truthful"].mean > result.results["constant(s)"].mean

    def test_augmented_runs(self):
        result = run_experiment(default_world(n_items=100), [(truthful(), 1)], mechanism=AUGMENTED,
                                replications=2, training_ratings=1000,
                                forest_config=ForestConfig(tree_count=10))
        assert result.results["truthful"].count == 2


class TestConvergence:
    def test_original_matches_analytic_expectation(self):
        """All raters agree on every item, so the score is 1/F - 1 with F from a binomial sample."""
        cfg = pages_world()
        result = convergence_curve(cfg, descriptor_map(PAGES_RULE), mechanism=ORIGINAL,
                                   schedule=[1000], replications=10)
        p_e = np.mean([1 - stats.norm.cdf(20, mu, 6.0) for mu in (10, 20, 30)])
        # own label x has share p_x; nine other items are sampled, F clamped at 1/10
        k = np.arange(10)
        f = np.maximum(k / 9, 0.1)
        expected = sum(p * (stats.binom.pmf(k, 9, p) / f).sum() for p in (p_e, 1 - p_e)) - 1
        got = result.by_n[1000]
        assert expected > 0.1
        assert abs(got.mean - expected) < 4 * got.stderr + 0.01

    def test_descriptor_blind_map_is_zero(self):
        rule = {"categorical": 0, "map": ["e", "e", "e"]}
        result = convergence_curve(default_world(), descriptor_map(rule), schedule=[200, 1000],
                                   replications=2, test_items=200, forest_config=ForestConfig(tree_count=10))
        assert [v for _, v in result.convergence] == [0.0, 0.0]

    def test_rows_and_schedule(self):
        result = convergence_curve(pages_world(), descriptor_map(PAGES_RULE), schedule=[1000, 500],
                                   replications=2, test_items=200, forest_config=ForestConfig(tree_count=10))
        assert [n for n, _ in result.convergence] == [500, 1000]


class TestCorrelation:
    def test_truthful_tracks_quality(self):
        result = run_experiment(default_world(), [(truthful(), 1)], replications=5)
        assert result.correlation > 0.5 and result.correlation_defined

    def test_constant_undefined(self):
        world = generate_world(default_world(n_items=50))
        reports, _ = make_reports(world, [(constant("s"), 1)], keyed_rng(0))
        assert rating_quality_correlation(world, reports) == (0.0, False)

    def test_uniform_random_near_zero(self):
        result = run_experiment(default_world(), [(uniform_random(), 1)], replications=20)
        assert abs(result.correlation) < 0.05
