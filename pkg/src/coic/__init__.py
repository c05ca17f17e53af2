"""Rain-/detail-aware contrastive learning with instance-level layer modulation."""

__version__ = "0.1.0"

from .coim import ModulatedAttention, ModulatedConv2d, temperature_profile  # noqa: E402,F401
from .encoder import EncoderConfig, InstanceEncoder, momentum_update  # noqa: E402,F401
from .models import ToyFormer, ToyUNet, count_params  # noqa: E402,F401
from .trainer import TrainConfig, evaluate, train  # noqa: E402,F401
