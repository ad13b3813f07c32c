"""Multi-task ICH segmentation and prognosis classification on synthetic CT-like data."""
from .harness import RunConfig, ablate, evaluate, train
from .model import MODES, ICHSCNet, ModelConfig
from .synth_data import generate_dataset, load_dataset

__all__ = ["MODES", "ICHSCNet", "ModelConfig", "RunConfig", "ablate", "evaluate", "generate_dataset", "load_dataset", "train"]
__version__ = "0.1.0"
