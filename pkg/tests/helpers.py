"""Small builders shared by several test modules."""
import numpy as np

from scalenets.arch import ArchSpec, LayerSpec
from scalenets.checkpoint import Checkpoint
from scalenets.model import weight_gain

ORACLE_CLASSES = np.arange(6, dtype=np.float64)


def oracle_arch():
    """One-modality network whose 1x1 classifier picks the class nearest to the voxel value."""
    return ArchSpec(
        "oracle", 1, 6, 1,
        (LayerSpec("merge:average"), LayerSpec("conv", k=1, channels_out=6), LayerSpec("softmax")),
    )


def oracle_checkpoint(sharpness=10.0):
    arch = oracle_arch()
    layer = arch.layers[1]
    shape = (6, 1, 1, 1, 1)
    c = ORACLE_CLASSES
    # logits s*(c*x - c^2/2): argmax is the class closest to x
    params = {
        "1.weight": (sharpness * c).reshape(shape) / weight_gain(layer, shape),
        "1.bias": -sharpness * c * c / 2.0,
    }
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return Checkpoint(arch, 0, params, dict(zeros), dict(zeros), 0.0, None)


def label_image_sample(labels):
    from scalenets.data import Sample

    labels = np.asarray(labels, dtype=np.uint8)
    return Sample(labels[None].astype(np.float64), labels)
