"""Residual adapters for a from-scratch dual encoder, with a multi-positive margin contrastive loss."""

from .adapter import AdapterWeights, adapter_apply, reparametrize, rescale_merge
from .checkpoint import Checkpoint, load, merge_checkpoint, save
from .encoder import EncoderConfig, encode
from .loss import LossConfig, info_nce, mpm_nce
from .model import AdapterBank, DualEncoder
from .synthdata import TaskSpec, gen_split
from .trainer import TrainConfig, finetune, pretrain

__version__ = "0.1.0"
