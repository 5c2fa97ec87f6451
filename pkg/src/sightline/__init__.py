"""Indoor/outdoor and cat/dog photo descriptions on a from-scratch VGG stack."""
from .estimator import VggImageClassifier
from .nn import Network
from .pipeline import CascadeModel, Description, cascade_classify, render_text
from .vgg import build_vgg16, build_vgg_mini, load_weights, replace_head, save_weights

__version__ = "0.1.0"

__all__ = [
    "CascadeModel",
    "Description",
    "Network",
    "VggImageClassifier",
    "build_vgg16",
    "build_vgg_mini",
    "cascade_classify",
    "load_weights",
    "render_text",
    "replace_head",
    "save_weights",
]
