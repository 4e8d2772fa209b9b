"""Post-operative face preview from a morphable-model residual predictor."""
from .augmentation import AugmentConfig, AugmentReport, augment_dataset, blend_weights, generate_pair, split_plane, stitch
from .dataset import (
    DatasetManifest,
    DeformityConfig,
    FaceRecord,
    PatientPair,
    generate_synthetic_cohort,
    load_dataset,
    save_dataset,
    split_kfold,
)
from .geometry import Plane, RigidTransform, fit_midsagittal_plane, point_line_distance, point_plane_distance, rigid_align
from .losses import LossBreakdown, LossEvaluator, LossWeights, total_loss
from .mesh import LandmarkSet, Mesh, load_landmarks, load_obj, save_landmarks, save_obj
from .metrics import SpatialIndex, chamfer_distance, hausdorff_distance
from .morphable import FitConfig, FitReport, MorphableModel, build_synthetic_model, decode, fit, load_model, save_model
from .network import MlpParams, init_params, load_params, predict_codes, save_params
from .predictor import ResidualCodePredictor, TrainConfig, ablation_study, cross_validate, learning_rate, train
from .preview import BarycentricMap, build_barycentric_map, export_sequence, interpolate_codes, transfer_prediction

__version__ = "0.1.0"
