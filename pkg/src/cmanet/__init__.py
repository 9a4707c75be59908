"""Cross-modality attention for two-stream video classification, in numpy."""

from cmanet.cma import CmaBlockParams, cma_attention, cma_block_forward, extract_attention_map, nonlocal_block_forward
from cmanet.data import DataConfig, VideoDataset, generate_binding_dataset, read_dataset, write_dataset
from cmanet.estimator import CMAVideoClassifier
from cmanet.model import TwoBranchModel, build_model, flow_config, load_checkpoint, rgb_config, save_checkpoint
from cmanet.tensor import Tensor, backward, no_grad
from cmanet.training import TrainConfig, evaluate, fusion_weight_sweep, iterative_train

__version__ = "0.1.0"

__all__ = [
    "CMAVideoClassifier",
    "CmaBlockParams",
    "DataConfig",
    "Tensor",
    "TrainConfig",
    "TwoBranchModel",
    "VideoDataset",
    "backward",
    "build_model",
    "cma_attention",
    "cma_block_forward",
    "evaluate",
    "extract_attention_map",
    "flow_config",
    "fusion_weight_sweep",
    "generate_binding_dataset",
    "iterative_train",
    "load_checkpoint",
    "no_grad",
    "nonlocal_block_forward",
    "read_dataset",
    "rgb_config",
    "save_checkpoint",
    "write_dataset",
]
