"""Universal adversarial patches that flip traffic-light labels.

The patch sits under the light housing and is optimized so a detector keeps
the box but reports the attacker's class (e.g. red read as green).
"""

from .compositor import IDENTITY, Placement, TransformParams, apply, placement_for, sample_transform
from .core import (AnnotatedImage, AttackConfig, BBox, ConfigError, DataError, Detection, EotRanges,
                   IntegrityError, NothingToAttack, NumericFailure, Patch, TargetClassMapping, TLPatchError,
                   apply_mapping, iou, profile_config)
from .data_io import ClassMap, PatchBundle, export_print, load_dataset, load_patch, save_dataset, save_patch
from .detector import ContextBlobDetector, DetectorAdapter, make_adapter, register_adapter
from .evaluator import AttackReport, evaluate, render_synthetic
from .losses import LossBreakdown, color_suppression, total_variation
from .trainer import init_patch, train

__version__ = "0.1.0"
