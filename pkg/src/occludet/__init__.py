"""occludet: video object detection that holds object position through occlusion.

A frame-level region detector whose backbone features are aggregated over
time by a recurrent memory cell, with three swappable alignment strategies
(none, correlation-based warping, learned coarse-scale alignment with pyramid
decoding), trained and evaluated on synthetic occlusion sequences.
"""

from .boxes import Detections
from .errors import ConfigError, ContractViolation, DataError, NumericError
from .frame_detector import DetectorConfig, FrameDetector
from .memory_cells import MemoryState
from .synthdata import SceneSpec, SequenceSample, generate_sequence, generate_static_composites
from .video_detector import TrainConfig, VideoDetector

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DataError",
    "Detections",
    "DetectorConfig",
    "FrameDetector",
    "MemoryState",
    "NumericError",
    "SceneSpec",
    "SequenceSample",
    "TrainConfig",
    "VideoDetector",
    "generate_sequence",
    "generate_static_composites",
    "__version__",
]
