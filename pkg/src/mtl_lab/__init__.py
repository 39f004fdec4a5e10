"""Multi-transmitter RSS localization lab.

Simulates a grid wireless sensor network under correlated log-normal
shadowing and localizes simultaneously active transmitters three ways: a
two-stage fully connected network (count classifier + per-count coordinate
regressor), ordinary-Kriging radio environment maps with histogram
segmentation, and a force-driven particle relaxation. The evalsuite module
reproduces the accompanying evaluation protocol (error CDFs, confusion
matrix, misclassification RMSE matrix, density sweeps).
"""

from .propagation import (PropagationParams, SensorLayout, ShadowingField,
                          TransmitterSet, fspl_db, grid_layout, received_power,
                          reference_power_db, sample_shadowing,
                          shadowing_covariance)
from .datasets import (Dataset, GenConfig, Normalizer, Sample, fit_normalizer,
                       generate_dataset, order_labels, read_dataset,
                       sample_scenario, split_train_val, write_dataset)
from .mlp import (AdamState, MlpNetwork, TrainConfig, adam_step, backward,
                  count_multiplications, elu, elu_grad, forward, init_xavier,
                  load_model, loss_mse, loss_xent, predict, predict_coordinates,
                  predict_count, save_model, train)
from .reml import (KrigingModel, RadioMap, RemBuilder, argmax_pixel, build_rem,
                   fit_kriging, localize_multi, reml_complexity,
                   threshold_segment, write_rem)
from .particlesim import (PsDiagnostics, PsParams, PsState, ps_complexity,
                          ps_forces, ps_initialize, ps_run, ps_run_batch,
                          ps_step, write_trajectory)
from .evalsuite import (ConfusionReport, EvalReport, MatchResult, SweepSettings,
                        confusion, density_sweep, error_cdf, ks_distance,
                        match_estimates, random_guess, rmse_matrix)
from .cli import ExperimentConfig, parse_config, serialize_config

__version__ = "0.1.0"
