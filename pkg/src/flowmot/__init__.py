"""Tracking-by-detection with a conditional normalizing-flow association cost."""
from .core import BBox, DeltaFeatures, Detection, FrameObservations, iou
from .flow import FlowCheckpoint, FlowConfig, train
from .sim import ScenarioConfig, generate_scenario, preset, render_detections
from .tracker import TrackerParams, track_sequence

__version__ = "0.1.0"
