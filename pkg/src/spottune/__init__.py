"""Per-example adaptive fine-tuning (frozen vs. tuned residual blocks chosen by a policy network)."""
from .data import LabeledSet, TaskSpec, generate_source, generate_target
from .gumbel import gumbel_max, gumbel_softmax, sample_gumbel, straight_through
from .losses import LossWeights, cross_entropy, entropy_loss, global_k_loss, total_loss, usage_fractions
from .model import Backbone, PolicyNetwork, block_forward, policy_logits, spottune_forward
from .tensor import Tape, Tensor
from .training import RunMode, TrainSettings, TransferModel, evaluate, pretrain, prepare_transfer, train

__version__ = "0.1.0"
