"""Cross-model feature alignment for task-oriented communication."""

from .channel import ChannelSpec, normalize_power, snr_to_sigma, transmit
from .errors import (AlignmentError, DegenerateFeatureError, DivergenceError, SingularityError,
                     ValidationError)
from .estimators import AlignmentMap, GdConfig, apply, estimate_ft, estimate_gd, estimate_ls, estimate_mmse
from .features import (AnchorSet, Dataset, GroundTruthTransform, TaskSpec, derive_system_features,
                       generate_task, make_ground_truth_transform, select_anchors)
from .relative import cosine_similarity, encode_batch_relative, relative_representation

__version__ = "0.1.0"
