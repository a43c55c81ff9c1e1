"""Factored multimodal 3D segmentation networks (cross-F / cross-M layers) on numpy."""
from .arch import ArchSpec, LayerSpec, build_variant, count_params, receptive_field
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Sample, generate_phantom, read_volume, write_volume
from .evaluation import DiceReport, dice_region, evaluate, wilcoxon_signed_rank
from .model import forward, init_params, param_shapes
from .training import TrainConfig, train

__version__ = "0.1.0"
