"""Guided diffusion sampling on exactly solvable Gaussian mixtures.

The package is organized as:

* :mod:`guidance_lab.mixture` -- closed-form densities, scores, class
  posteriors, and exact conditional posteriors at any noise level;
* :mod:`guidance_lab.schedules` -- discrete noise schedules;
* :mod:`guidance_lab.samplers` -- forward/reverse chains with guidance,
  common-random-number coupling, and reverse-SDE simulation;
* :mod:`guidance_lab.checks` -- statistical verification of the guidance
  identities (martingale conservation, one-step decrement, tail bounds,
  law equivalence, discretization behavior);
* :mod:`guidance_lab.harness` -- experiment configuration, aggregation,
  and CSV/JSON output;
* :mod:`guidance_lab.cli` -- the ``guidance-lab`` command.
"""

from .checks import (
    CheckReport,
    NoImprovementError,
    bound_suite,
    discretization_study,
    improvement_integral,
    marginal_equivalence,
    martingale_quadrature_reference,
    martingale_residual,
    relative_error_ratio,
    theorem1_decrement,
)
from .harness import (
    ExperimentConfig,
    SummaryRow,
    emit_plot_data,
    run_gmm_experiment,
    summarize,
)
from .mixture import (
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
from .samplers import (
    CoupledTrials,
    GuidanceSpec,
    Trajectory,
    TrialRecord,
    coupled_pair,
    euler_maruyama_reverse,
    forward_chain,
    reverse_chain,
    run_coupled_trials,
    trial_stream,
)
from .schedules import Schedule, build_schedule, level_of, linear_beta_schedule

__version__ = "0.1.0"
