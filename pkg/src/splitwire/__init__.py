"""Device/edge split inference with channel pruning, feature recovery and a lossless feature codec."""

from .attention import ChannelImportance, ca_forward, compute_importance, insert_ca, remove_ca
from .codec import FeaturePacket, QuantizedTensor, decode_packet, encode_tensor
from .compression import CompressionConfig, fr_forward, insert_fr, prune_channels
from .data import Dataset, generate
from .model import ModelSpec, build_toy_resnet
from .training import evaluate_accuracy, train

__all__ = [
    "ChannelImportance", "CompressionConfig", "Dataset", "FeaturePacket", "ModelSpec",
    "QuantizedTensor", "build_toy_resnet", "ca_forward", "compute_importance", "decode_packet",
    "encode_tensor", "evaluate_accuracy", "fr_forward", "generate", "insert_ca", "insert_fr",
    "prune_channels", "remove_ca", "train",
]
