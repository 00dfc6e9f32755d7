from .network import (
    ArchitectureConfig,
    ModelParameters,
    backward,
    build_model,
    count_parameters,
    forward,
    forward_logits,
    preset_config,
    reference_config,
    small_config,
    strip_output,
    tiny_config,
)
from .serialization import decode_model, encode_model, load_model, read_header, save_model

__all__ = [
    "ArchitectureConfig", "ModelParameters", "backward", "build_model", "count_parameters",
    "forward", "forward_logits", "preset_config", "reference_config", "small_config",
    "strip_output", "tiny_config", "decode_model", "encode_model", "load_model",
    "read_header", "save_model",
]
