"""Desk-scale 2D turbulence forecasting laboratory.

Pseudo-spectral vorticity simulation, a small reverse-mode tensor
engine, multi-grid forecasting models, single-step training, rollout
metrics with spectral diagnostics, and an empirical error-budget probe.
"""

from . import cli, container, data, dns, evaluate, model, spectral, tensor, train
from .data import (DatasetManifest, denormalize, generate_dataset,
                   iterate_pairs, load_manifest, normalize, pair_batches)
from .dns import CFLError, Forcing, SimConfig, Trajectory, simulate
from .evaluate import (BoundCheck, DeltaEstimate, GrowthEstimate,
                       NetworkStepper, PersistenceStepper, RolloutReport,
                       TheoremProbe, estimate_growth_factor,
                       evaluate_trajectory, l2_error, measure_delta_hf,
                       relative_l2, rollout, ssim, theorem_bound,
                       verify_bound)
from .model import (CoreConfig, Forecaster, ModelConfig, VARIANTS,
                    load_checkpoint, save_checkpoint)
from .spectral import (SpectrumCurve, SpectralField, VorticityField,
                       dealias_mask, enstrophy_spectrum, high_band_norm,
                       normalized_spectral_error, project_high,
                       total_enstrophy)
from .tensor import Graph, Tensor, grad_check
from .train import (TrainConfig, TrainLog, TrainResult, TrainingAbort,
                    adam_step, mse_loss)
# the train() entry point stays on its submodule (turblab.train.train)
# so the top-level name keeps pointing at the module

__version__ = "0.1.0"
