"""Volumetric diffusion engine: schedules, prediction parameterizations,
DDIM sampling, desk-scale training, MRI preprocessing, and evaluation."""

from .schedule import NoiseSchedule, build_linear_schedule, ddim_timesteps
from .param import (PredictionKind, forward_diffuse, make_target,
                    predict_x0, predict_eps, training_loss)
from .sampler import SamplerConfig, ddim_step, generate, gaussian_noise
from .volume import (Volume, read_nifti, write_nifti, reorient_axial,
                     resample_isotropic, center_of_mass, pad_crop,
                     normalize_quantize, extract_slices, TARGET_SHAPE)
from .manifest import Manifest, ManifestRecord, split_subjects
from .denoiser import (GaussianOracle, TinyUNet, UNetDenoiser, TrainConfig,
                       EmaState, AdamState, adam_step, ema_update, augment,
                       train, TrainingDivergedError)
from .evaluation import (FeatureStats, extract_features, fit_stats,
                         frechet_distance, ks_statistic, ks_pvalue,
                         permutation_protocol, nn_search)

__version__ = "0.1.0"
