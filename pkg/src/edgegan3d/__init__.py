"""Edge-aware adversarial segmentation of 3D ultrasound volumes."""

from .adversarial import LossWeights, PatchDiscriminator, dice_loss, discriminator_loss, generator_loss
from .config import ModelConfig, TrainConfig, load_config, save_config
from .data import (
    EdgeMap, PhantomSpec, SegMask, Volume, extract_edge_map, generate_phantom, load_mask, load_volume,
    normalize, resample, save_mask, save_volume,
)
from .gfe import EASNet
from .metrics import MetricReport, dice, evaluate_case, hausdorff, jaccard, precision, recall

__version__ = "0.1.0"
