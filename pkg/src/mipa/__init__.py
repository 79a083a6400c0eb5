"""Mixed-patch (MiPa) modality-agnostic training for patch-based RGB/IR detectors."""

from .agnostic import (GrlGate, ModalityClassifier, grl_forward, lambda_schedule, modality_bce,
                       pool_modality_map, total_loss)
from .boxes import BoundingBox, DetectionSet, iou
from .config import ExperimentConfig
from .data import PairedSample, SceneSpec, estimate_pairwise_mi, generate_scene, load_coco_pairs
from .encoder import EncoderConfig, PatchEncoder
from .evaluation import EvalReport, average_precision, build_report
from .model import MiPaDetector
from .mosaic import ModalityMask, PatchGrid, mix, modality_map_from_mask, patchify, sample_mask, unpatchify
from .rho import RhoPolicy
from .training import run_ablation_grid, run_eval, run_training

__version__ = "0.1.0"
