"""Adversarial point counterattack: purifying adversarial point clouds with a learned counter-perturbation."""

from .apc import APCConfig, APCModel, apc_param_count, apc_purify, build_apc, load_apc, loss_geo, loss_sem, loss_total, save_apc, train_apc
from .attacks import AttackSpec, default_specs, generate_attack_set, run_attack_batch
from .config import ExperimentConfig, load_config
from .datasets import DatasetConfig, PairRecord, PairStore, build_dataset, load_pairs, store_pairs
from .defenses import DefenseSpec, apply_defense, sor, srs
from .evaluation import APCDefense, BaselineDefense, EvalReport, IdentityDefense, eval_cross_model, eval_defense, measure_efficiency, run_ablation
from .geometry import DegenerateInputError, chamfer_one_sided, hausdorff_one_sided, knn_indices
from .victims import TrainConfig, build_victim, input_gradient, param_count, param_hash, train_victim

__version__ = "0.1.0"
