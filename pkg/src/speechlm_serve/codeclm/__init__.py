"""Toy codec language model: parameters, adapters, forward pass and decoding."""

from .decode import (
    AgreementReport,
    DecodeResult,
    decode,
    generate_next,
    greedy_agreement,
    sequence_logprob,
)
from .lora import (
    AdapterKind,
    LoraAdapter,
    decode_adapter,
    encode_adapter,
    load_adapter,
    merge_dense,
    random_adapter,
    save_adapter,
)
from .model import forward
from .params import ModelConfig, Parameters, init_params, zero_params
from .quant import QuantParams, dequant_matmul, quantize_weights
from .sampling import DecodeMode, DecodeParams, greedy_step, sample_step

__all__ = [
    "AdapterKind",
    "AgreementReport",
    "DecodeMode",
    "DecodeParams",
    "DecodeResult",
    "LoraAdapter",
    "ModelConfig",
    "Parameters",
    "QuantParams",
    "decode",
    "decode_adapter",
    "dequant_matmul",
    "encode_adapter",
    "forward",
    "generate_next",
    "greedy_agreement",
    "greedy_step",
    "init_params",
    "load_adapter",
    "merge_dense",
    "quantize_weights",
    "random_adapter",
    "sample_step",
    "save_adapter",
    "sequence_logprob",
    "zero_params",
]
