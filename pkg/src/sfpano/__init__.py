"""Source-free adaptation of a pinhole-trained segmenter to panoramic images.

Modules: ``tensor``/``functional`` (autodiff core), ``segnet`` (model),
``panosynth`` (synthetic benchmark), ``pcgd`` (pseudo-label scoring and
denoising), ``cram`` (cross-resolution fusion), ``trainer``, ``metrics``,
``io`` (checkpoints and configs), ``experiments`` and ``cli``.
"""
from .functional import IGNORE_INDEX
from .segnet import ModelConfig, ParamSnapshot, SegModel
from .tensor import Tensor, no_grad, set_default_dtype
from .trainer import TrainConfig, adapt, pretrain_source

__version__ = "0.1.0"
__all__ = ["IGNORE_INDEX", "ModelConfig", "ParamSnapshot", "SegModel", "Tensor", "TrainConfig", "adapt",
           "no_grad", "pretrain_source", "set_default_dtype"]
