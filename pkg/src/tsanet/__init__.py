"""Video object segmentation from RGB frames and optical flow.

A dual-branch encoder fuses appearance and motion, deformable alignment pulls
features of the neighbouring frames onto the target frame, and an implicit
decoder queries the aligned pyramid at any output resolution.
"""

from .model import ModelConfig, TSANet, Window, forward_segment

__version__ = "0.1.0"
__all__ = ["ModelConfig", "TSANet", "Window", "forward_segment"]
