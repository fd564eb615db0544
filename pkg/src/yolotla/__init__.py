"""CPU-only YOLO-TLA detector family, built on a small NCHW tensor core.

The package covers the full desk-scale loop: model configs and executable
blocks, a parameter/FLOP analyzer, anchor fitting, raw-map decoding with
NMS, detection metrics, and a command line front end. No training, no GPU.
"""

from .anchors import AnchorSet, assign_to_scales, fit_anchors
from .costs import CostReport, analyze, count_empirical
from .data import Dataset, letterbox, load_coco, load_image
from .errors import (ConfigError, ParseError, ShapeError, WeightError,
                     YoloTlaError)
from .graph import (Model, ModelConfig, build_model, bundled_config_names,
                    find_config, parse_config)
from .metrics import EvalReport, evaluate
from .postprocess import Detection, decode, iou, nms
from .tensor import ConvSpec, Tensor, conv2d, conv2d_naive, load_tns, save_tns

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "ConfigError",
    "ConvSpec",
    "CostReport",
    "Dataset",
    "Detection",
    "EvalReport",
    "Model",
    "ModelConfig",
    "ParseError",
    "ShapeError",
    "Tensor",
    "WeightError",
    "YoloTlaError",
    "analyze",
    "assign_to_scales",
    "build_model",
    "bundled_config_names",
    "conv2d",
    "conv2d_naive",
    "count_empirical",
    "decode",
    "evaluate",
    "find_config",
    "fit_anchors",
    "iou",
    "letterbox",
    "load_coco",
    "load_image",
    "load_tns",
    "nms",
    "parse_config",
    "save_tns",
    "__version__",
]
