"""Decoupled common/unique multimodal redundancy-reduction learning at desk scale."""
from .objective import DimSplit, LossWeights, barlow_twins_loss, cross_correlation, decur_loss
from .synthdata import AugmentPolicy, PairedDataset, SyntheticSpec, generate
from .trainer import TrainConfig, preset_config, train

__all__ = [
    "AugmentPolicy", "DimSplit", "LossWeights", "PairedDataset", "SyntheticSpec", "TrainConfig",
    "barlow_twins_loss", "cross_correlation", "decur_loss", "generate", "preset_config", "train",
]
__version__ = "0.1.0"
