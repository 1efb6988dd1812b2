"""Exact probability machinery for class-conditional isotropic Gaussian mixtures.

Everything a diffusion sampler needs from its target distribution is available
in closed form here: densities and scores of a mixture at any noise level, the
Bayes posterior over class labels ("classifier probability"), and the exact
conditional distribution of an earlier noisy state given a later one.

All densities are computed in log space with log-sum-exp, and component
responsibilities via softmax, so that noise levels near 1 combined with
far-apart component means do not underflow.  Reciprocal probabilities are
returned exactly (no clamping); callers must be prepared for very large
magnitudes in far tails.

Values are immutable after construction and all operations are pure
functions, so models can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "GaussianComponent",
    "MixtureModel",
    "ClassConditionalModel",
    "NoiseLevel",
    "noised_mixture",
    "log_density",
    "score",
    "mixture_cdf",
    "sample_mixture",
    "classifier_prob",
    "classifier_log_prob",
    "conditional_score",
    "marginal_score",
    "guidance_direction",
    "posterior_mixture",
    "containment_radius",
    "load_model",
    "save_model",
    "preset_model",
    "PRESET_NAMES",
]

_WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class NoiseLevel:
    """A point on the diffusion noise axis, identified by the signal scale.

    ``alpha_bar`` is the squared signal coefficient: a clean sample ``x0``
    noised to this level is distributed as
    ``sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * z``.  The equivalent
    forward-time coordinate is ``time = 1 - alpha_bar``.
    """

    alpha_bar: float

    def __post_init__(self):
        if not 0.0 < self.alpha_bar <= 1.0:
            raise ValueError(f"alpha_bar must be in (0, 1], got {self.alpha_bar}")

    @property
    def time(self) -> float:
        return 1.0 - self.alpha_bar

    @classmethod
    def from_time(cls, t: float) -> "NoiseLevel":
        return cls(alpha_bar=1.0 - t)


@dataclass(frozen=True)
class GaussianComponent:
    """One isotropic Gaussian component: N(mean, variance * I) with a mixture weight."""

    mean: np.ndarray
    variance: float
    weight: float

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1:
            raise ValueError("component mean must be a vector")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        if not self.variance > 0.0:
            raise ValueError(f"component variance must be > 0, got {self.variance}")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"component weight must be in (0, 1], got {self.weight}")


class MixtureModel:
    """A weighted mixture of isotropic Gaussians in d dimensions.

    Component parameters are stacked into read-only arrays (``means`` with
    shape (K, d), ``variances`` and ``weights`` with shape (K,)) so that
    density and score evaluation vectorize over batches of query points.
    Duplicated components are legal (their weights simply add); zero-weight
    components are rejected at construction.
    """

    def __init__(self, components: Sequence[GaussianComponent]):
        if len(components) == 0:
            raise ValueError("a mixture needs at least one component")
        dims = {c.mean.shape[0] for c in components}
        if len(dims) != 1:
            raise ValueError(f"component means disagree on dimension: {sorted(dims)}")
        weights = np.array([c.weight for c in components], dtype=float)
        total = weights.sum()
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"component weights must sum to 1, got {total!r}")
        self._init_arrays(
            np.stack([c.mean for c in components]),
            np.array([c.variance for c in components], dtype=float),
            weights,
        )

    def _init_arrays(self, means, variances, weights):
        self._means = means
        self._variances = variances
        self._weights = weights
        self._log_weights = np.log(weights)
        for arr in (self._means, self._variances, self._weights, self._log_weights):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, means, variances, weights) -> "MixtureModel":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        variances = np.asarray(variances, dtype=float)
        weights = np.asarray(weights, dtype=float)
        return cls(
            [
                GaussianComponent(mean=m, variance=float(v), weight=float(w))
                for m, v, w in zip(means, variances, weights, strict=True)
            ]
        )

    @classmethod
    def _from_trusted_arrays(cls, means, variances, weights) -> "MixtureModel":
        # fast path for internally derived parameters that are valid by construction
        self = cls.__new__(cls)
        self._init_arrays(means, variances, weights)
        return self

    @property
    def dimension(self) -> int:
        return self._means.shape[1]

    @property
    def n_components(self) -> int:
        return self._means.shape[0]

    @property
    def means(self) -> np.ndarray:
        return self._means

    @property
    def variances(self) -> np.ndarray:
        return self._variances

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def components(self) -> tuple[GaussianComponent, ...]:
        return tuple(
            GaussianComponent(mean=m, variance=float(v), weight=float(w))
            for m, v, w in zip(self._means, self._variances, self._weights)
        )

    def __repr__(self):
        return f"MixtureModel(d={self.dimension}, K={self.n_components})"


class ClassConditionalModel:
    """Class priors plus one mixture per class, all in the same dimension.

    The marginal distribution is itself a Gaussian mixture: the class
    mixtures flattened with weights ``prior[c] * weight[k|c]``.
    """

    def __init__(self, priors, class_mixtures: Sequence[MixtureModel]):
        priors = np.asarray(priors, dtype=float)
        if priors.ndim != 1 or len(priors) != len(class_mixtures):
            raise ValueError("need one prior per class mixture")
        if np.any(priors <= 0.0):
            raise ValueError("every class prior must be > 0")
        if abs(priors.sum() - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"class priors must sum to 1, got {priors.sum()!r}")
        dims = {m.dimension for m in class_mixtures}
        if len(dims) != 1:
            raise ValueError(f"class mixtures disagree on dimension: {sorted(dims)}")
        priors.setflags(write=False)
        self._priors = priors
        self._class_mixtures = tuple(class_mixtures)

    @property
    def num_classes(self) -> int:
        return len(self._priors)

    @property
    def priors(self) -> np.ndarray:
        return self._priors

    @property
    def class_mixtures(self) -> tuple[MixtureModel, ...]:
        return self._class_mixtures

    @property
    def dimension(self) -> int:
        return self._class_mixtures[0].dimension

    @cached_property
    def marginal_mixture(self) -> MixtureModel:
        means = np.concatenate([m.means for m in self._class_mixtures])
        variances = np.concatenate([m.variances for m in self._class_mixtures])
        weights = np.concatenate(
            [p * m.weights for p, m in zip(self._priors, self._class_mixtures)]
        )
        return MixtureModel.from_arrays(means, variances, weights)

    def _check_class(self, c: int) -> int:
        c = int(c)
        if not 0 <= c < self.num_classes:
            raise ValueError(f"class index {c} out of range [0, {self.num_classes})")
        return c

    def __repr__(self):
        return f"ClassConditionalModel(d={self.dimension}, C={self.num_classes})"


# ---------------------------------------------------------------------------
# Mixture-level operations
# ---------------------------------------------------------------------------


def noised_mixture(model: MixtureModel, level: NoiseLevel) -> MixtureModel:
    """Push a mixture through the forward diffusion to the given noise level.

    Component k maps to mean ``sqrt(alpha_bar) * mu_k`` and variance
    ``alpha_bar * sigma_k^2 + (1 - alpha_bar)``; weights are unchanged.  For
    unit-variance components the noised variance is exactly 1 at every level.
    """
    ab = level.alpha_bar
    return MixtureModel._from_trusted_arrays(
        math.sqrt(ab) * model.means,
        ab * model.variances + (1.0 - ab),
        model.weights,
    )


def _as_points(x, dimension: int) -> tuple[np.ndarray, bool]:
    """Normalize a query to shape (m, d); report whether it was a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1:
        if x.shape[0] != dimension:
            raise ValueError(f"x has length {x.shape[0]}, model dimension is {dimension}")
        return x.reshape(1, dimension), True
    if x.ndim == 2:
        if x.shape[1] != dimension:
            raise ValueError(f"x has {x.shape[1]} columns, model dimension is {dimension}")
        return x, False
    raise ValueError(f"x must be a vector or a (m, d) batch, got shape {x.shape}")


def _weighted_log_pdfs(mixture: MixtureModel, points: np.ndarray) -> np.ndarray:
    """log w_k + log N(x; mu_k, sigma_k^2 I) for points (m, d), laid out as (K, m).

    The component axis comes first so that the log-sum-exp and softmax
    reductions below run along contiguous rows (reducing over the short
    trailing axis of an (m, K) array is an order of magnitude slower).
    """
    d = mixture.dimension
    means, variances = mixture._means, mixture._variances
    consts = mixture._log_weights - 0.5 * d * np.log(2.0 * np.pi * variances)
    out = np.empty((means.shape[0], points.shape[0]))
    for k in range(means.shape[0]):
        diff = points - means[k]
        sq = np.square(diff[:, 0]) if d == 1 else np.einsum("md,md->m", diff, diff)
        row = out[k]
        np.multiply(sq, -0.5 / variances[k], out=row)
        row += consts[k]
    return out


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    """log(sum(exp(logits), axis=0)) for (K, m) logits, overflow-safe."""
    mx = logits.max(axis=0)
    return mx + np.log(np.exp(logits - mx).sum(axis=0))


def log_density(mixture: MixtureModel, x) -> float | np.ndarray:
    """Log of the mixture density at x, overflow-safe via log-sum-exp.

    x may be a single point of shape (d,) or a batch of shape (m, d).
    """
    points, single = _as_points(x, mixture.dimension)
    lp = _logsumexp_rows(_weighted_log_pdfs(mixture, points))
    return float(lp[0]) if single else lp


def score(mixture: MixtureModel, x) -> np.ndarray:
    """Gradient of the log-density at x.

    Equal to ``sum_k r_k(x) (mu_k - x) / sigma_k^2`` where r_k are the
    posterior component responsibilities (softmax of per-component
    log-densities plus log-weights).
    """
    points, single = _as_points(x, mixture.dimension)
    logits = _weighted_log_pdfs(mixture, points)
    logits -= logits.max(axis=0)
    np.exp(logits, out=logits)
    inv_den = np.reciprocal(logits.sum(axis=0))
    means, variances = mixture._means, mixture._variances
    s = np.zeros_like(points)
    for k in range(means.shape[0]):
        resp = logits[k]
        resp *= inv_den
        s += resp[:, None] * ((means[k] - points) / variances[k])
    return s[0] if single else s


def mixture_cdf(mixture: MixtureModel, x) -> float | np.ndarray:
    """CDF of a one-dimensional mixture at scalar (or array of) x."""
    if mixture.dimension != 1:
        raise ValueError("mixture_cdf is defined for d = 1 only")
    x = np.asarray(x, dtype=float)
    z = (x[..., None] - mixture.means[:, 0]) / np.sqrt(mixture.variances)
    out = np.sum(mixture.weights * ndtr(z), axis=-1)
    return float(out) if out.ndim == 0 else out


def sample_mixture(mixture: MixtureModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n i.i.d. samples, shape (n, d).  Consumes the generator deterministically."""
    cum = np.cumsum(mixture.weights)
    idx = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    idx = np.minimum(idx, mixture.n_components - 1)
    z = rng.standard_normal((n, mixture.dimension))
    return mixture.means[idx] + np.sqrt(mixture.variances[idx])[:, None] * z


# ---------------------------------------------------------------------------
# Class-conditional operations
# ---------------------------------------------------------------------------


def _class_log_joint(model: ClassConditionalModel, level: NoiseLevel, points: np.ndarray) -> np.ndarray:
    """log prior_c + log p_{X|c}(x) at the given level, shape (C, m)."""
    rows = [
        np.log(p) + _logsumexp_rows(_weighted_log_pdfs(noised_mixture(mix, level), points))
        for p, mix in zip(model.priors, model.class_mixtures)
    ]
    return np.stack(rows, axis=0)


def classifier_log_prob(model: ClassConditionalModel, c: int, level: NoiseLevel, x) -> float | np.ndarray:
    """log p(c | x) at the given noise level, exact in log space."""
    c = model._check_class(c)
    points, single = _as_points(x, model.dimension)
    joint = _class_log_joint(model, level, points)
    lp = joint[c] - _logsumexp_rows(joint)
    return float(lp[0]) if single else lp


def classifier_prob(model: ClassConditionalModel, c: int, level: NoiseLevel, x) -> float | np.ndarray:
    """Bayes posterior p(c | x) of class c given a sample at the given noise level.

    Strictly inside (0, 1) for strictly positive priors.  The reciprocal
    ``exp(-classifier_log_prob(...))`` may be astronomically large in far
    tails; no clamping is applied.
    """
    return np.exp(classifier_log_prob(model, c, level, x))


def conditional_score(model: ClassConditionalModel, c: int, level: NoiseLevel, x) -> np.ndarray:
    """Score of the class-c mixture noised to the given level."""
    c = model._check_class(c)
    return score(noised_mixture(model.class_mixtures[c], level), x)


def marginal_score(model: ClassConditionalModel, level: NoiseLevel, x) -> np.ndarray:
    """Score of the flattened marginal mixture noised to the given level."""
    return score(noised_mixture(model.marginal_mixture, level), x)


def guidance_direction(model: ClassConditionalModel, c: int, level: NoiseLevel, x) -> np.ndarray:
    """Gradient of log p(c | x): conditional score minus marginal score."""
    return conditional_score(model, c, level, x) - marginal_score(model, level, x)


def posterior_mixture(
    model: ClassConditionalModel, c: int, t: float, tau: float, x
) -> MixtureModel:
    """Exact law of the noisy state at forward time tau given the state x at time t.

    For 0 <= tau < t < 1 the later state given the earlier one is Gaussian
    with scale ``a = sqrt((1-t)/(1-tau))`` and variance ``s2 = (t-tau)/(1-tau)``
    per coordinate.  Conditioning the class-c mixture at time tau on the
    observation x at time t is therefore conjugate component by component:
    the result is again a Gaussian mixture, with evidence-reweighted weights
    that sum to 1.
    """
    c = model._check_class(c)
    if not 0.0 <= tau < t:
        raise ValueError(f"need 0 <= tau < t, got tau={tau}, t={t}")
    if t >= 1.0:
        raise ValueError(f"need t < 1, got t={t}")
    points, single = _as_points(x, model.dimension)
    if not single:
        raise ValueError("posterior_mixture takes a single point x")
    x = points[0]

    prior = noised_mixture(model.class_mixtures[c], NoiseLevel.from_time(tau))
    a = math.sqrt((1.0 - t) / (1.0 - tau))
    s2 = (t - tau) / (1.0 - tau)

    v = prior.variances
    evidence_var = a * a * v + s2
    resid = x[None, :] - a * prior.means
    sq = np.einsum("kd,kd->k", resid, resid)
    d = model.dimension
    log_evidence = -0.5 * sq / evidence_var - 0.5 * d * np.log(2.0 * np.pi * evidence_var)

    post_var = v * s2 / evidence_var
    post_means = (s2 * prior.means + (a * v)[:, None] * x[None, :]) / evidence_var[:, None]
    logits = np.log(prior.weights) + log_evidence
    post_weights = np.exp(logits - logits.max())
    post_weights /= post_weights.sum()
    return MixtureModel.from_arrays(post_means, post_var, post_weights)


# ---------------------------------------------------------------------------
# Containment radius for the tail bounds
# ---------------------------------------------------------------------------


def containment_radius(
    model: ClassConditionalModel,
    tol: float = 1e-6,
    mc_draws: int = 10**6,
    seed: int = 0,
) -> float:
    """Smallest radius R with P(||X0|| < R | c) > 1/2 for every class.

    In one dimension the mixture CDF is used with a bisection accurate to
    ``tol``; in higher dimensions the radius is estimated per class from the
    empirical median of ``mc_draws`` Monte Carlo norms.
    """
    radii = []
    for ci, mix in enumerate(model.class_mixtures):
        if model.dimension == 1:

            def contained(r, mix=mix):
                return mixture_cdf(mix, r) - mixture_cdf(mix, -r)

            lo, hi = 0.0, 1.0
            while contained(hi) <= 0.5:
                hi *= 2.0
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if contained(mid) > 0.5:
                    hi = mid
                else:
                    lo = mid
            radii.append(hi)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ci,)))
            norms = np.sort(np.linalg.norm(sample_mixture(mix, mc_draws, rng), axis=1))
            # smallest sorted value whose left fraction strictly exceeds 1/2
            k = mc_draws // 2 + 1
            radii.append(float(norms[k - 1]) + tol)
    return max(radii)


# ---------------------------------------------------------------------------
# Model files and presets
# ---------------------------------------------------------------------------


def _two_class_unit_preset() -> ClassConditionalModel:
    """Bundled reference preset: two equiprobable classes in one dimension.

    Class 0 is a standard normal; class 1 is an equal-weight pair of unit
    Gaussians at +1 and -1.
    """
    class0 = MixtureModel.from_arrays([[0.0]], [1.0], [1.0])
    class1 = MixtureModel.from_arrays([[1.0], [-1.0]], [1.0, 1.0], [0.5, 0.5])
    return ClassConditionalModel([0.5, 0.5], [class0, class1])


_PRESETS = {"paper-gmm": _two_class_unit_preset}

PRESET_NAMES = tuple(sorted(_PRESETS))


def preset_model(name: str) -> ClassConditionalModel:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}") from None


def _require(condition: bool, where: str, message: str):
    if not condition:
        raise ValueError(f"{where}: {message}")


def load_model(path_or_preset: str) -> ClassConditionalModel:
    """Load a model from a preset name or a JSON definition file.

    The file schema is ``{"dimension": d, "classes": [{"prior": p,
    "components": [{"mean": [...], "variance": v, "weight": w}]}]}``.
    Malformed files raise ValueError with line-level diagnostics.
    """
    if path_or_preset in _PRESETS:
        return _PRESETS[path_or_preset]()
    try:
        with open(path_or_preset, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValueError(
            f"{path_or_preset}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from None

    _require(isinstance(doc, dict), path_or_preset, "top level must be an object")
    _require("dimension" in doc, path_or_preset, "missing field 'dimension'")
    _require("classes" in doc, path_or_preset, "missing field 'classes'")
    d = doc["dimension"]
    _require(isinstance(d, int) and d >= 1, path_or_preset, "'dimension' must be a positive integer")

    priors = []
    mixtures = []
    for i, cls in enumerate(doc["classes"]):
        where = f"{path_or_preset}: classes[{i}]"
        _require(isinstance(cls, dict), where, "must be an object")
        _require("prior" in cls, where, "missing field 'prior'")
        _require("components" in cls, where, "missing field 'components'")
        priors.append(cls["prior"])
        comps = []
        for j, comp in enumerate(cls["components"]):
            cw = f"{where}.components[{j}]"
            _require(isinstance(comp, dict), cw, "must be an object")
            for field in ("mean", "variance", "weight"):
                _require(field in comp, cw, f"missing field '{field}'")
            mean = np.asarray(comp["mean"], dtype=float)
            _require(mean.ndim == 1 and mean.shape[0] == d, cw, f"'mean' must have length {d}")
            _require(comp["variance"] > 0, cw, "'variance' must be > 0")
            _require(0 < comp["weight"] <= 1, cw, "'weight' must be in (0, 1]")
            comps.append(GaussianComponent(mean=mean, variance=float(comp["variance"]), weight=float(comp["weight"])))
        try:
            mixtures.append(MixtureModel(comps))
        except ValueError as e:
            raise ValueError(f"{where}: {e}") from None
    try:
        return ClassConditionalModel(priors, mixtures)
    except ValueError as e:
        raise ValueError(f"{path_or_preset}: {e}") from None


def save_model(model: ClassConditionalModel, path: str):
    doc = {
        "dimension": model.dimension,
        "classes": [
            {
                "prior": float(p),
                "components": [
                    {"mean": c.mean.tolist(), "variance": c.variance, "weight": c.weight}
                    for c in mix.components
                ],
            }
            for p, mix in zip(model.priors, model.class_mixtures)
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
