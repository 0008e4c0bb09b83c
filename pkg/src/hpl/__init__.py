"""Simulation and inference for heralded photon-pair sources read out by multiplexed threshold detectors."""

__version__ = "0.1.0"

from .coincidence import (
    ClickFrequencies,
    CoincidenceCounts,
    ExperimentScenario,
    extract_exact_k,
    klyshko_counts,
    run_experiment,
)
from .detector_bank import (
    ConditionalProbMatrix,
    DetectorBankConfig,
    build_conditional_matrix,
    prob_exactly_k,
    prob_set_clicks,
    threshold_detect,
)
from .inversion import NumberDistributionEstimate, infer_noise_free, invert_clicks, noise_equivalent_efficiency
from .klyshko import KlyshkoDataset, KlyshkoFitResult, estimate_klyshko, fit_klyshko, model_eta, noise_budget
from .noise_theory import (
    HeraldNoiseParams,
    check_noise_loss_equivalence,
    conditional_signal,
    herald_origin_binomial,
    lossy_signal_conditional,
    noisy_herald_conditional,
)
from .source_model import JointPhotonDistribution, PulseEvent, SourceParams, build_sfwm_joint, noise_means, sample_pulse
