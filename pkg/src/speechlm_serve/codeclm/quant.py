"""
Int8 weight quantization.

Symmetric per-output-channel quantization: each row ``w`` of a weight matrix
gets ``scale = max|w| / 127`` (1.0 for an all-zero row) and is stored as
``q = clip(rint(w / scale), -127, 127)``. Reconstruction error per element is
bounded by ``scale / 2``. Matmuls run against the dequantized weights; the
tied output projection goes through ``dequant_matmul``.

Quantized: every linear projection and the tied embedding/output matrix.
Kept in float: position embeddings, norm gains/biases, condition projection.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from ..errors import NumericError
from .params import LayerParams, ModelConfig, Parameters

logger = logging.getLogger(__name__)

QUANT_MAX = 127
QUANTIZED_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2")
FLOAT_LAYER_FIELDS = ("ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class QuantMatrix:
    values: np.ndarray  # int8, (d_out, d_in)
    scale: np.ndarray  # float64, (d_out,)

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return (self.values.astype(np.float64) * self.scale[:, None]).astype(dtype)


def quantize_matrix(weight: np.ndarray) -> QuantMatrix:
    w = np.asarray(weight, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("cannot quantize non-finite weights")
    row_max = np.max(np.abs(w), axis=1) if w.shape[1] else np.zeros(w.shape[0])
    scale = np.where(row_max > 0, row_max / QUANT_MAX, 1.0)
    values = np.clip(np.rint(w / scale[:, None]), -QUANT_MAX, QUANT_MAX).astype(np.int8)
    return QuantMatrix(values=values, scale=scale)


def dequant_matmul(q: QuantMatrix, x: np.ndarray) -> np.ndarray:
    """``x @ dequant(q).T`` for a vector or a batch of row vectors."""
    return np.asarray(x, dtype=np.float32) @ q.dequantize(np.float32).T


@dataclass
class QuantParams:
    config: ModelConfig
    tok_emb: QuantMatrix
    pos_emb: np.ndarray
    layers: List[Dict[str, Union[QuantMatrix, np.ndarray]]]
    cond_proj: np.ndarray
    _float_view: Optional[Parameters] = field(default=None, repr=False, compare=False)

    def matrices(self):
        yield "tok_emb", self.tok_emb
        for i, layer in enumerate(self.layers):
            for name in QUANTIZED_LAYER_FIELDS:
                yield f"layers.{i}.{name}", layer[name]

    def dequantized(self) -> Parameters:
        """Float parameters built from the dequantized weights (computed once)."""
        if self._float_view is None:
            layers = []
            for layer in self.layers:
                tensors = {name: layer[name].dequantize() for name in QUANTIZED_LAYER_FIELDS}
                tensors.update({name: layer[name] for name in FLOAT_LAYER_FIELDS})
                layers.append(LayerParams(**tensors))
            self._float_view = Parameters(
                self.config, self.tok_emb.dequantize(), self.pos_emb, layers, self.cond_proj
            )
        return self._float_view


def quantize_weights(params: Parameters) -> QuantParams:
    layers = []
    for layer in params.layers:
        entry: Dict[str, Union[QuantMatrix, np.ndarray]] = {
            name: quantize_matrix(getattr(layer, name)) for name in QUANTIZED_LAYER_FIELDS
        }
        entry.update({name: getattr(layer, name) for name in FLOAT_LAYER_FIELDS})
        layers.append(entry)
    qparams = QuantParams(
        params.config, quantize_matrix(params.tok_emb), params.pos_emb, layers, params.cond_proj
    )
    logger.info(f"Quantized {1 + len(layers) * len(QUANTIZED_LAYER_FIELDS)} weight matrices to int8")
    return qparams


def as_float_params(params: Union[Parameters, QuantParams]) -> Parameters:
    if isinstance(params, QuantParams):
        return params.dequantized()
    return params
