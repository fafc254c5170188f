"""Multi-layer slot attention for unsupervised object segmentation at desk scale."""

from .config import DataGenConfig, TrainConfig, load_config
from .data import SceneSpec, generate_shapes_dataset, load_dataset, load_split
from .evaluate import evaluate_model
from .features import FeatureBackendConfig, FeatureExtractor, FeatureStack, extract_features
from .fusion import SlotFamily, SlotFusion, align_family, hungarian_match
from .model import ModelConfig, MultiLayerSlotModel, SingleLayerSlotModel, reconstruction_loss
from .slot_attention import SlotAttention
from .training import train_self_distilled, train_single_phase

__version__ = "0.1.0"
