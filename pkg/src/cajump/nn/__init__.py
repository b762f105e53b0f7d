from cajump.nn.functional import DegenerateBatchError, DimensionError, sparse_ce_loss
from cajump.nn.model import DEFAULT_ARCHITECTURE, Model, ModelConfig, parse_architecture
from cajump.nn.optim import AdamState, NonFiniteError, adam_step

__all__ = [
    "AdamState",
    "DEFAULT_ARCHITECTURE",
    "DegenerateBatchError",
    "DimensionError",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "adam_step",
    "parse_architecture",
    "sparse_ce_loss",
]
