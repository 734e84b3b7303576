"""Multi-stream CNN for offline writer identification, in numpy."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import Network, build_network, deepwriter_spec, output_shapes, param_count
from .optim import TrainConfig, lr_at, sgd_update
from .patching import PatchPlan
from .pipeline import aggregate_scores, evaluate, finetune, identify, train

__version__ = "0.1.0"
