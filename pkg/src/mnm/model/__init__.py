"""Two-view cascade detector: backbone, RoI cropping, refinement stages, MIL pooling."""

from .backbone import Backbone
from .checkpoint import CheckpointError, load_model, save_model
from .config import MIL_SCHEMES, ConfigError, ModelConfig
from .heads import CascadeStage, CrossViewAttention, DualClassifier, DynamicConv, HeadOutput, dual_classify
from .mil import bce_from_log_complement, breast_log_complement, image_log_complement, mil_pool
from .network import (
    BreastForward,
    CascadeOutput,
    MnMDetector,
    breast_and_exam_scores,
    breast_score,
    exam_score,
)
from .roi import interpolation_matrix, roi_align
