"""voxseg: a self-contained 3-D segmentation engine.

Attention-augmented U-Net family (UNet-FV, AGUNet, DAUNet, DAGUNet) with
toggleable multi-scale input and deep supervision, built on a from-scratch
reverse-mode autodiff core, plus a synthetic phantom data pipeline and the
full detection/segmentation evaluation protocol.
"""

from .autodiff import Tensor, no_grad
from .estimator import VolumetricSegmenter
from .losses import LossConfig
from .models import ModelConfig, build_model, experiment_name
from .optim import TrainConfig
from .volume import Volume

__all__ = ["Tensor", "no_grad", "VolumetricSegmenter", "LossConfig",
           "ModelConfig", "build_model", "experiment_name", "TrainConfig",
           "Volume"]

__version__ = "1.0.0"
