import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from guidance_lab import (
    ClassConditionalModel,
    GaussianComponent,
    MixtureModel,
    NoiseLevel,
    classifier_log_prob,
    classifier_prob,
    conditional_score,
    containment_radius,
    guidance_direction,
    load_model,
    log_density,
    marginal_score,
    noised_mixture,
    posterior_mixture,
    preset_model,
    sample_mixture,
    score,
)
from guidance_lab.mixture import mixture_cdf, save_model

from oracles import (
    closed_classifier_prob,
    closed_conditional_score,
    closed_marginal_score,
    finite_difference_gradient,
)

STD_NORMAL = MixtureModel.from_arrays([[0.0]], [1.0], [1.0])
CLASS1 = MixtureModel.from_arrays([[1.0], [-1.0]], [1.0, 1.0], [0.5, 0.5])

# mixtures exercising the generic paths: unequal variances, 2-d, many components
GENERIC_MIXTURES = [
    CLASS1,
    MixtureModel.from_arrays([[2.0], [-1.0], [0.5]], [0.5, 2.0, 1.0], [0.2, 0.3, 0.5]),
    MixtureModel.from_arrays([[1.0, -1.0], [-2.0, 0.5]], [0.7, 1.3], [0.4, 0.6]),
]


class TestConstruction:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MixtureModel.from_arrays([[0.0], [1.0]], [1.0, 1.0], [0.5, 0.4])

    def test_zero_weight_component_rejected(self):
        with pytest.raises(ValueError, match="weight"):
            GaussianComponent(mean=np.array([0.0]), variance=1.0, weight=0.0)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            GaussianComponent(mean=np.array([0.0]), variance=0.0, weight=1.0)

    def test_duplicated_components_are_legal(self):
        m = MixtureModel.from_arrays([[1.0], [1.0]], [1.0, 1.0], [0.5, 0.5])
        assert_allclose(log_density(m, np.array([1.0])), log_density(STD_NORMAL, np.array([0.0])))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            MixtureModel(
                [
                    GaussianComponent(np.array([0.0]), 1.0, 0.5),
                    GaussianComponent(np.array([0.0, 1.0]), 1.0, 0.5),
                ]
            )

    def test_priors_validated(self):
        with pytest.raises(ValueError, match="prior"):
            ClassConditionalModel([0.7, 0.4], [STD_NORMAL, CLASS1])

    def test_noise_level_range(self):
        with pytest.raises(ValueError):
            NoiseLevel(0.0)
        with pytest.raises(ValueError):
            NoiseLevel(1.0 + 1e-9)
        assert NoiseLevel.from_time(0.25).alpha_bar == 0.75


class TestNoisedMixture:
    def test_zero_noise_is_identity(self):
        out = noised_mixture(CLASS1, NoiseLevel(1.0))
        assert_allclose(out.means, CLASS1.means)
        assert_allclose(out.variances, CLASS1.variances)
        assert_allclose(out.weights, CLASS1.weights)

    def test_full_noise_limit_is_standard_normal(self):
        out = noised_mixture(CLASS1, NoiseLevel(1e-12))
        assert_allclose(out.means, 0.0, atol=1e-5)
        assert_allclose(out.variances, 1.0, rtol=1e-12)

    def test_quarter_level_means_and_variances(self):
        out = noised_mixture(CLASS1, NoiseLevel(0.25))
        assert_allclose(out.means[:, 0], [0.5, -0.5])
        assert_allclose(out.variances, [1.0, 1.0])

    def test_unit_variance_is_preserved_at_every_level(self):
        for ab in (0.05, 0.3, 0.77, 1.0):
            out = noised_mixture(CLASS1, NoiseLevel(ab))
            assert_allclose(out.variances, 1.0, rtol=1e-14)

    def test_moments_match_forward_noising_simulation(self):
        """Noised-mixture moments vs direct simulation of one noising step."""
        ab = 0.25
        rng = np.random.default_rng(7)
        n = 200_000
        x0 = sample_mixture(CLASS1, n, rng)
        xt = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * rng.standard_normal((n, 1))
        out = noised_mixture(CLASS1, NoiseLevel(ab))
        mean_ref = float(out.weights @ out.means[:, 0])
        var_ref = float(out.weights @ (out.variances + out.means[:, 0] ** 2)) - mean_ref**2
        se_mean = math.sqrt(var_ref / n)
        assert abs(np.mean(xt) - mean_ref) < 3 * se_mean
        se_var = np.std(xt.ravel() ** 2, ddof=1) / math.sqrt(n)
        assert abs(np.var(xt, ddof=1) - var_ref) < 3 * se_var


class TestLogDensity:
    def test_standard_normal_at_mode(self):
        assert_allclose(log_density(STD_NORMAL, np.array([0.0])), -0.5 * math.log(2 * math.pi), rtol=1e-15)

    def test_two_component_at_origin(self):
        expected = -0.5 - 0.5 * math.log(2 * math.pi)
        assert_allclose(log_density(CLASS1, np.array([0.0])), expected, rtol=1e-15)

    def test_extreme_point_stays_finite(self):
        for x in (50.0, -50.0):
            val = log_density(CLASS1, np.array([x]))
            assert math.isfinite(val)

    def test_batch_matches_single(self):
        xs = np.linspace(-4, 4, 9)[:, None]
        batch = log_density(CLASS1, xs)
        singles = [log_density(CLASS1, x) for x in xs]
        assert_allclose(batch, singles, rtol=0, atol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            log_density(CLASS1, np.array([0.0, 1.0]))


class TestScore:
    def test_symmetric_point_is_zero(self):
        for ab in (0.1, 0.5, 1.0):
            m = noised_mixture(CLASS1, NoiseLevel(ab))
            assert_allclose(score(m, np.array([0.0])), [0.0], atol=1e-16)

    def test_clean_level_closed_form(self):
        m = noised_mixture(CLASS1, NoiseLevel(1.0))
        assert_allclose(score(m, np.array([1.0])), [-1.0 + math.tanh(1.0)], rtol=1e-12)

    @pytest.mark.parametrize("mixture", GENERIC_MIXTURES)
    def test_matches_finite_difference_of_log_density(self, mixture):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.uniform(-3, 3, size=mixture.dimension)
            fd = finite_difference_gradient(lambda y: log_density(mixture, y), x, h=1e-5)
            s = score(mixture, x)
            assert_allclose(s, fd, rtol=1e-6, atol=1e-9)


class TestClassifierProb:
    def test_full_noise_gives_prior(self, model):
        p = classifier_prob(model, 1, NoiseLevel(1e-12), np.array([0.0]))
        assert_allclose(p, 0.5, atol=1e-12)

    def test_clean_level_at_origin(self, model):
        p = classifier_prob(model, 1, NoiseLevel(1.0), np.array([0.0]))
        assert_allclose(p, 2.0 / (2.0 + 2.0 * math.exp(0.5)), rtol=1e-14)

    def test_tail_approaches_one(self, model):
        lvl = NoiseLevel(1.0)
        p10 = classifier_prob(model, 1, lvl, np.array([10.0]))
        p20 = classifier_prob(model, 1, lvl, np.array([20.0]))
        assert 0.999 < p10 < 1.0
        assert p10 < p20 <= 1.0

    def test_strictly_inside_unit_interval(self, model):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = classifier_prob(model, 1, NoiseLevel(rng.uniform(0.05, 1.0)), rng.uniform(-6, 6, 1))
            assert 0.0 < p < 1.0

    def test_bayes_normalization(self, model):
        rng = np.random.default_rng(11)
        for _ in range(50):
            lvl = NoiseLevel(rng.uniform(0.05, 1.0))
            x = rng.uniform(-6, 6, 1)
            total = sum(classifier_prob(model, c, lvl, x) for c in range(model.num_classes))
            assert abs(total - 1.0) < 1e-10


class TestConditionalScore:
    def test_zero_at_origin(self, model):
        for ab in (0.2, 0.6, 1.0):
            assert_allclose(conditional_score(model, 1, NoiseLevel(ab), np.array([0.0])), [0.0], atol=1e-16)

    def test_single_gaussian_class_score(self, model):
        rng = np.random.default_rng(2)
        for _ in range(10):
            ab = rng.uniform(0.05, 1.0)
            x = rng.uniform(-5, 5, 1)
            assert_allclose(conditional_score(model, 0, NoiseLevel(ab), x), -x, rtol=1e-14)

    def test_quarter_level_closed_form(self, model):
        got = conditional_score(model, 1, NoiseLevel(0.25), np.array([2.0]))
        assert_allclose(got, [-2.0 + 0.5 * math.tanh(1.0)], rtol=1e-13)


class TestMarginalScore:
    def test_zero_at_origin(self, model):
        for ab in (0.2, 0.6, 1.0):
            assert_allclose(marginal_score(model, NoiseLevel(ab), np.array([0.0])), [0.0], atol=1e-16)

    def test_clean_level_closed_form(self, model):
        e2, eh = math.exp(-2.0), math.exp(-0.5)
        expected = -1.0 + (1.0 - e2) / (1.0 + e2 + 2.0 * eh)
        assert_allclose(marginal_score(model, NoiseLevel(1.0), np.array([1.0])), [expected], rtol=1e-13)

    def test_bayes_decomposition(self, model):
        """Marginal score equals the posterior-weighted combination of class scores."""
        rng = np.random.default_rng(17)
        for _ in range(25):
            lvl = NoiseLevel(rng.uniform(0.05, 1.0))
            x = rng.uniform(-6, 6, 1)
            combo = sum(
                classifier_prob(model, c, lvl, x) * conditional_score(model, c, lvl, x)
                for c in range(model.num_classes)
            )
            assert_allclose(marginal_score(model, lvl, x), combo, atol=1e-10)


class TestGuidanceDirection:
    def test_zero_at_origin(self, model):
        for ab in (0.3, 1.0):
            assert_allclose(guidance_direction(model, 1, NoiseLevel(ab), np.array([0.0])), [0.0], atol=1e-16)

    def test_clean_level_closed_form(self, model):
        e2, eh = math.exp(-2.0), math.exp(-0.5)
        expected = math.tanh(1.0) - (1.0 - e2) / (1.0 + e2 + 2.0 * eh)
        got = guidance_direction(model, 1, NoiseLevel(1.0), np.array([1.0]))
        assert_allclose(got, [expected], rtol=1e-12)

    def test_matches_gradient_of_log_classifier_prob(self, model):
        rng = np.random.default_rng(23)
        for _ in range(20):
            lvl = NoiseLevel(rng.uniform(0.1, 0.99))
            x = rng.uniform(-4, 4, 1)
            fd = finite_difference_gradient(
                lambda y: classifier_log_prob(model, 1, lvl, y), x, h=1e-5
            )
            got = guidance_direction(model, 1, lvl, x)
            assert_allclose(got, fd, rtol=1e-6, atol=1e-9)


class TestClosedFormAgreement:
    """The generic log-sum-exp paths against the hand closed forms, to 1e-12."""

    GRID_X = np.linspace(-6.0, 6.0, 5)
    GRID_AB = (0.05, 0.25, 0.5, 0.75, 1.0)

    @pytest.mark.parametrize("ab", GRID_AB)
    def test_all_three_closed_forms(self, model, ab):
        lvl = NoiseLevel(ab)
        for x in self.GRID_X:
            xv = np.array([x])
            assert abs(classifier_prob(model, 1, lvl, xv) - closed_classifier_prob(ab, x)) <= 1e-12
            assert abs(conditional_score(model, 1, lvl, xv)[0] - closed_conditional_score(ab, x)) <= 1e-12
            assert abs(marginal_score(model, lvl, xv)[0] - closed_marginal_score(ab, x)) <= 1e-12


class TestInverseProbGradientIdentity:
    def test_identity_at_100_random_points(self, model):
        """d(1/p)/dy equals (1/p) * (marginal score - conditional score)."""
        rng = np.random.default_rng(41)
        for _ in range(100):
            ab = float(rng.uniform(0.05, 0.99))
            x = rng.uniform(-4.0, 4.0, 1)
            lvl = NoiseLevel(ab)
            fd = finite_difference_gradient(
                lambda y: 1.0 / classifier_prob(model, 1, lvl, y), x, h=1e-5
            )
            inv_p = 1.0 / classifier_prob(model, 1, lvl, x)
            analytic = inv_p * (marginal_score(model, lvl, x) - conditional_score(model, 1, lvl, x))
            denom = max(float(np.linalg.norm(analytic)), 1e-12)
            assert float(np.linalg.norm(fd - analytic)) / denom <= 1e-5


class TestPosteriorMixture:
    def test_degenerate_limit_collapses_to_point_mass(self, model):
        x = np.array([0.8])
        post = posterior_mixture(model, 1, t=0.5, tau=0.5 - 1e-9, x=x)
        assert_allclose(post.means[:, 0], 0.8, atol=1e-8)
        assert np.all(post.variances < 1e-8)
        assert_allclose(post.weights.sum(), 1.0, rtol=1e-14)

    def test_single_component_conjugacy(self, model):
        """Hand conjugate posterior for the single-Gaussian class."""
        t, tau, x = 0.5, 0.25, 0.8
        post = posterior_mixture(model, 0, t, tau, np.array([x]))
        a = math.sqrt((1 - t) / (1 - tau))
        s2 = (t - tau) / (1 - tau)
        var_expected = s2 / (s2 + a * a)  # prior variance is exactly 1
        mean_expected = a * x / (s2 + a * a)
        assert post.n_components == 1
        assert_allclose(post.variances, [var_expected], rtol=1e-14)
        assert_allclose(post.means, [[mean_expected]], rtol=1e-14)

    def test_single_component_against_quadrature(self, model):
        """Posterior density vs quadrature-normalized prior-times-likelihood."""
        t, tau, x = 0.6, 0.2, -0.4
        post = posterior_mixture(model, 0, t, tau, np.array([x]))
        a = math.sqrt((1 - t) / (1 - tau))
        s2 = (t - tau) / (1 - tau)
        grid = np.linspace(-10, 10, 100_001)
        prior = np.exp(log_density(noised_mixture(model.class_mixtures[0], NoiseLevel.from_time(tau)), grid[:, None]))
        lik = np.exp(-((x - a * grid) ** 2) / (2 * s2)) / math.sqrt(2 * math.pi * s2)
        unnorm = prior * lik
        norm = np.trapezoid(unnorm, grid)
        got = np.exp(log_density(post, grid[:, None]))
        assert_allclose(got, unnorm / norm, atol=1e-8)

    def test_two_component_against_quadrature(self, model):
        t, tau, x = 0.5, 0.25, 0.8
        post = posterior_mixture(model, 1, t, tau, np.array([x]))
        assert post.n_components == 2
        assert abs(post.weights.sum() - 1.0) <= 1e-12
        a = math.sqrt((1 - t) / (1 - tau))
        s2 = (t - tau) / (1 - tau)
        grid = np.linspace(-10, 10, 100_001)
        prior = np.exp(log_density(noised_mixture(model.class_mixtures[1], NoiseLevel.from_time(tau)), grid[:, None]))
        lik = np.exp(-((x - a * grid) ** 2) / (2 * s2)) / math.sqrt(2 * math.pi * s2)
        unnorm = prior * lik
        norm = np.trapezoid(unnorm, grid)
        got = np.exp(log_density(post, grid[:, None]))
        assert_allclose(got, unnorm / norm, atol=1e-8)

    def test_density_integrates_to_one(self, model):
        post = posterior_mixture(model, 1, 0.7, 0.3, np.array([1.5]))
        grid = np.linspace(-12, 12, 200_001)
        total = np.trapezoid(np.exp(log_density(post, grid[:, None])), grid)
        assert abs(total - 1.0) <= 1e-6

    def test_invalid_times_rejected(self, model):
        x = np.array([0.0])
        with pytest.raises(ValueError):
            posterior_mixture(model, 1, t=0.3, tau=0.3, x=x)
        with pytest.raises(ValueError):
            posterior_mixture(model, 1, t=0.2, tau=0.5, x=x)
        with pytest.raises(ValueError):
            posterior_mixture(model, 1, t=1.0, tau=0.5, x=x)


class TestContainmentRadius:
    def test_single_gaussian_median_radius(self):
        single = ClassConditionalModel([1.0], [STD_NORMAL])
        # P(|X| < R) > 1/2 for a standard normal exactly when R > Phi^-1(0.75)
        expected = 0.6744897501960817
        r = containment_radius(single)
        assert expected < r < expected + 2e-6

    def test_every_class_over_half_and_minimal(self, model):
        r = containment_radius(model)
        for mix in model.class_mixtures:
            assert mixture_cdf(mix, r) - mixture_cdf(mix, -r) > 0.5
        # minimality: backing off by 10x the tolerance loses the property for some class
        shrunk = r - 1e-5
        assert any(
            mixture_cdf(mix, shrunk) - mixture_cdf(mix, -shrunk) <= 0.5
            for mix in model.class_mixtures
        )

    def test_monte_carlo_radius_in_higher_dimension(self):
        mix = MixtureModel.from_arrays([[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0], [0.5, 0.5])
        m2 = ClassConditionalModel([1.0], [mix])
        r = containment_radius(m2, mc_draws=200_000, seed=3)
        rng = np.random.default_rng(99)
        norms = np.linalg.norm(sample_mixture(mix, 200_000, rng), axis=1)
        frac = np.mean(norms < r)
        assert abs(frac - 0.5) < 0.01
        assert frac > 0.5 - 3 * math.sqrt(0.25 / 200_000)


class TestTailBounds:
    """Spot checks of the classifier and score bounds; the full grid runs in acceptance."""

    def test_classifier_upper_bound(self, model):
        r = containment_radius(model)
        for c in (0, 1):
            for ab in (0.1, 0.5, 0.9):
                for y in (-4.0, 0.0, 4.0):
                    neg_log_p = -classifier_log_prob(model, c, NoiseLevel(ab), np.array([y]))
                    rhs = math.log(2 / model.priors[c]) + (abs(y) + math.sqrt(ab) * r) ** 2 / (2 * (1 - ab))
                    assert neg_log_p <= rhs + 1e-9

    def test_score_bounds_with_constant_ten(self, model):
        r = containment_radius(model)
        for ab in (0.1, 0.5, 0.9):
            for y in (-6.0, -1.0, 2.0, 6.0):
                bound = 10.0 * ((abs(y) + math.sqrt(ab) * r) / (1 - ab) + 1 / math.sqrt(1 - ab))
                lvl = NoiseLevel(ab)
                assert abs(marginal_score(model, lvl, np.array([y]))[0]) <= bound
                assert abs(conditional_score(model, 1, lvl, np.array([y]))[0]) <= bound


class TestModelFiles:
    def test_preset_structure(self, model):
        assert model.num_classes == 2
        assert model.dimension == 1
        assert_allclose(model.priors, [0.5, 0.5])
        assert model.class_mixtures[1].n_components == 2

    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(str(path))
        assert_allclose(back.priors, model.priors)
        for a, b in zip(back.class_mixtures, model.class_mixtures):
            assert_allclose(a.means, b.means)
            assert_allclose(a.variances, b.variances)
            assert_allclose(a.weights, b.weights)

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"dimension": 1,\n  "classes": [}\n')
        with pytest.raises(ValueError, match="line 2"):
            load_model(str(path))

    def test_semantic_error_names_the_field(self, tmp_path):
        path = tmp_path / "bad.json"
        doc = {
            "dimension": 1,
            "classes": [
                {"prior": 1.0, "components": [{"mean": [0.0], "variance": -1.0, "weight": 1.0}]}
            ],
        }
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match=r"classes\[0\].components\[0\]"):
            load_model(str(path))

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            preset_model("nope")
