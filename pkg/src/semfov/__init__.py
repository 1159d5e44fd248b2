"""Dirichlet semantic maps with foveal calibration and active gaze selection."""

from .calibration import CalibrationModel, EccentricityBins, TrainingRecord, TrainingSet, train
from .dirichlet import DirichletFit, fit_mle, kl_divergence
from .harness import (
    CampaignConfig,
    ExploreResult,
    SearchResult,
    TrialConfig,
    aggregate_with_sem,
    cumulative_performance,
    run_campaign,
    run_explore_trial,
    run_search_trial,
    success_rate,
    time_per_iteration,
)
from .policy import Policy, select_next
from .semantic_map import BoundingBox, Detection, GridGeometry, SemanticMap, kaplan_update
from .simworld import EmulatorConfig, SceneSpec, emulate_detections, generate_scene

__version__ = "0.1.0"
