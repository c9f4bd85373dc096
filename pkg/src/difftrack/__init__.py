"""Text-conditioned single-object tracker with a generative fusion branch.

A caption and a first-frame template drive a small latent-diffusion model
whose intermediate features are pooled into the visual token space and
decoded against the search region; a center-based head turns the fused
tokens into a box. Everything runs at desk scale on a CPU.
"""

from .config import Config, load_config, schema_help
from .datasets import (Sequence, generate_sequence, list_sequences,
                       load_sequence, read_results, write_results)
from .errors import (ConfigError, DataError, DegenerateInputError,
                     DiffTrackError, InputError, NumericsError, ParseError,
                     ShapeError, UndefinedMetricError, UnitError)
from .geometry import (BoundingBox, BoxFormat, BoxUnit, crop_region, giou,
                       iou, localization_loss, map_box_to_crop,
                       map_box_to_frame)
from .model import (TrackerModel, build_model, load_checkpoint, load_tracker,
                    save_checkpoint)
from .tracker import Tracker, run_sequence
from .training import evaluate_mean_iou, held_out_sequences, lr_at, train_tracker

__all__ = [
    "BoundingBox", "BoxFormat", "BoxUnit", "Config", "ConfigError",
    "DataError", "DegenerateInputError", "DiffTrackError", "InputError",
    "NumericsError", "ParseError", "Sequence", "ShapeError", "Tracker",
    "TrackerModel", "UndefinedMetricError", "UnitError", "build_model",
    "crop_region", "evaluate_mean_iou", "generate_sequence", "giou",
    "held_out_sequences", "iou", "list_sequences", "load_checkpoint",
    "load_config", "load_sequence", "load_tracker", "localization_loss",
    "lr_at", "map_box_to_crop", "map_box_to_frame", "read_results",
    "run_sequence", "save_checkpoint", "schema_help", "train_tracker",
    "write_results",
]

__version__ = "0.1.0"
