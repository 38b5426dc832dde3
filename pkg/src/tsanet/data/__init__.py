from .flow import flow_to_rgb, rgb_to_flow
from .io import list_sequences, load_dataset, load_sequence, save_sequence
from .sampler import joint_sampler
from .sequence import FrameSequence, window_indices
from .synthetic import SyntheticConfig, generate_synthetic_sequence, image_to_pseudo_video

__all__ = [
    "FrameSequence",
    "SyntheticConfig",
    "flow_to_rgb",
    "generate_synthetic_sequence",
    "image_to_pseudo_video",
    "joint_sampler",
    "list_sequences",
    "load_dataset",
    "load_sequence",
    "rgb_to_flow",
    "save_sequence",
    "window_indices",
]
