"""Block-level pruning of convolutional networks by direct block removal."""

from .blocks import BlockKind, BlockSpec, build_block, block_flops, block_param_count, is_shape_preserving
from .data import Dataset, load_cifar10_binary, normalize, split, synth_dataset
from .pruning import (
    brute_force,
    evaluate_accuracy,
    greedy_prune,
    importance_direct,
    sequential_baseline,
    srinit_importance,
    srinit_prune,
)
from .rng import Rng
from .tensor import Tensor
from .trainer import TrainConfig, finetune, lr_at_epoch, train
from .zoo import Network, NetworkSpec, build_network, preset_spec, prune, prune_set, resnet_spec, valid_blocks

__version__ = "0.1.0"
