from .auxiliary import AuxiliaryBranch, ChannelAttention, HAAM, SpatialAttention, build_auxiliary
from .universal import (DECODER_LAST_CHANNELS, ConfigError, ModelConfig, UniversalNet,
                        UniversalOutput, build_universal, domain_index)

__all__ = [
    "AuxiliaryBranch", "ChannelAttention", "HAAM", "SpatialAttention", "build_auxiliary",
    "DECODER_LAST_CHANNELS", "ConfigError", "ModelConfig", "UniversalNet", "UniversalOutput",
    "build_universal", "domain_index",
]
