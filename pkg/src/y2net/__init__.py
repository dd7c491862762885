"""Two-stage FCRN echo and noise suppression in plain numpy."""

from .frontend import DEFAULT_FRAME, FrameConfig, analyze, highpass, synthesize
from .pipeline import Y2Net, Y2NetConfig, apply_mask, mask_gain
from .ynet import YNet, YNetConfig

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_FRAME",
    "FrameConfig",
    "Y2Net",
    "Y2NetConfig",
    "YNet",
    "YNetConfig",
    "analyze",
    "apply_mask",
    "highpass",
    "mask_gain",
    "synthesize",
]
