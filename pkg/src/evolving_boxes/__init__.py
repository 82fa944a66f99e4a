"""Two-stage vehicle detector (proposal network + fine-tuning network) on numpy."""
from .boxgeom import Box, BoxDelta, Detection
from .config import RunConfig, desk_preset, load_config, paper_preset
from .model import EvolvingBoxes, build_model

__all__ = ["Box", "BoxDelta", "Detection", "EvolvingBoxes", "RunConfig", "build_model",
           "desk_preset", "load_config", "paper_preset"]
__version__ = "0.1.0"
