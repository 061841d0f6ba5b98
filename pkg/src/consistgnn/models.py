"""GCN and GAT forward passes over sampled blocks or a whole graph."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .graphstore import CsrGraph
from .numerics import GradTensor
from .sampler import BlockStack, full_blocks

CHECKPOINT_MAGIC = b"GNNP"
_ARCH_TAGS = {"gcn": 0, "gat": 1}


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 32
    num_classes: int = 2
    # GAT heads per layer; a single int applies to every layer
    heads: Union[int, tuple[int, ...]] = 1
    dropout_rate: float = 0.0
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.arch not in _ARCH_TAGS:
            raise ConfigError(f"arch must be 'gcn' or 'gat', got {self.arch!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden_dim < 1 or self.num_classes < 1:
            raise ConfigError("hidden_dim and num_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        heads = self.head_counts()
        if len(heads) != self.num_layers or min(heads) < 1:
            raise ConfigError("heads must be >= 1 and given once per layer")

    def head_counts(self) -> tuple[int, ...]:
        if isinstance(self.heads, int):
            return (self.heads,) * self.num_layers
        return tuple(int(h) for h in self.heads)


@dataclass
class GcnParams:
    config: ModelConfig
    weights: list[GradTensor]
    biases: list[GradTensor]

    def tensors(self) -> list[GradTensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class GatParams:
    config: ModelConfig
    # indexed [layer][head]
    weights: list[list[GradTensor]]
    att_src: list[list[GradTensor]]
    att_dst: list[list[GradTensor]]
    biases: list[GradTensor] = field(default_factory=list)

    def tensors(self) -> list[GradTensor]:
        out = []
        for layer in range(len(self.weights)):
            for w, a_s, a_d in zip(self.weights[layer], self.att_src[layer], self.att_dst[layer]):
                out += [w, a_s, a_d]
            out.append(self.biases[layer])
        return out


ModelParams = Union[GcnParams, GatParams]


def layer_dims(cfg: ModelConfig, in_dim: int) -> list[tuple[int, int, int]]:
    """``(d_in, d_out_per_head, heads)`` for every layer."""
    heads = cfg.head_counts() if cfg.arch == "gat" else (1,) * cfg.num_layers
    dims = []
    d_in = in_dim
    for layer in range(cfg.num_layers):
        last = layer == cfg.num_layers - 1
        d_head = cfg.num_classes if last else cfg.hidden_dim
        dims.append((d_in, d_head, heads[layer]))
        d_in = d_head * heads[layer]
    return dims


def _glorot(rng, rows: int, cols: int) -> GradTensor:
    limit = np.sqrt(6.0 / (rows + cols))
    return GradTensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


def init_params(cfg: ModelConfig, in_dim: int, rng: np.random.Generator) -> ModelParams:
    dims = layer_dims(cfg, in_dim)
    if cfg.arch == "gcn":
        return GcnParams(
            cfg,
            [_glorot(rng, d_in, d_out) for d_in, d_out, _ in dims],
            [GradTensor(np.zeros((1, d_out)), requires_grad=True) for _, d_out, _ in dims],
        )
    weights, att_src, att_dst, biases = [], [], [], []
    for layer, (d_in, d_head, heads) in enumerate(dims):
        weights.append([_glorot(rng, d_in, d_head) for _ in range(heads)])
        att_src.append([_glorot(rng, d_head, 1) for _ in range(heads)])
        att_dst.append([_glorot(rng, d_head, 1) for _ in range(heads)])
        last = layer == cfg.num_layers - 1
        biases.append(GradTensor(np.zeros((1, d_head if last else d_head * heads)),
                                 requires_grad=True))
    return GatParams(cfg, weights, att_src, att_dst, biases)


# ---------------------------------------------------------------------------
# forward passes


def _as_blocks(blocks: Union[BlockStack, CsrGraph], num_layers: int) -> BlockStack:
    if isinstance(blocks, CsrGraph):
        return full_blocks(blocks, np.arange(blocks.num_nodes), num_layers)
    if len(blocks) != num_layers:
        raise ShapeError(f"{len(blocks)} blocks for a {num_layers}-layer model")
    return blocks


def _inputs(blocks: BlockStack, X: GradTensor, in_dim: int) -> GradTensor:
    if X.shape[1] != in_dim:
        raise ShapeError(f"features have {X.shape[1]} columns, model expects {in_dim}")
    return nx.gather_rows(X, blocks.input_nodes)


def _maybe_dropout(h: GradTensor, masks, layer: int) -> GradTensor:
    if masks is None or layer == 0 or masks[layer] is None:
        return h
    return nx.dropout(h, masks[layer])


def gcn_forward(params: GcnParams, blocks, X: GradTensor, dropout_masks=None) -> GradTensor:
    """Mean aggregation over sampled neighbors and self, then a linear map.

    Hidden layers use ReLU; the last layer returns raw logits for the
    destination nodes of the final block.
    """
    L = len(params.weights)
    blocks = _as_blocks(blocks, L)
    h = _inputs(blocks, X, params.weights[0].shape[0])
    for layer, (block, w, b) in enumerate(zip(blocks, params.weights, params.biases)):
        h = _maybe_dropout(h, dropout_masks, layer)
        msgs = nx.gather_rows(h, block.edge_src)
        agg = nx.segment_mean(msgs, block.edge_dst, block.num_dst)
        h = nx.add(nx.matmul(agg, w), b)
        if layer < L - 1:
            h = nx.relu(h)
    return h


def _gat_head(h, block, w, a_src, a_dst, slope):
    z = nx.matmul(h, w)
    score_src = nx.matmul(z, a_src)
    # destinations are the leading rows of the source list
    score_dst = nx.gather_rows(nx.matmul(z, a_dst), np.arange(block.num_dst))
    e = nx.leaky_relu(nx.add(nx.gather_rows(score_src, block.edge_src),
                             nx.gather_rows(score_dst, block.edge_dst)), slope)
    alpha = nx.segment_softmax(e, block.edge_dst, block.num_dst)
    msgs = nx.mul(nx.gather_rows(z, block.edge_src), alpha)
    return nx.segment_sum(msgs, block.edge_dst, block.num_dst)


def gat_forward(params: GatParams, blocks, X: GradTensor, dropout_masks=None) -> GradTensor:
    """Multi-head attention over sampled neighbors and self.

    Hidden layers concatenate heads and apply ELU; the output layer averages
    heads and returns logits.
    """
    cfg = params.config
    L = len(params.weights)
    blocks = _as_blocks(blocks, L)
    h = _inputs(blocks, X, params.weights[0][0].shape[0])
    for layer, block in enumerate(blocks):
        h = _maybe_dropout(h, dropout_masks, layer)
        outs = [_gat_head(h, block, w, a_s, a_d, cfg.leaky_slope)
                for w, a_s, a_d in zip(params.weights[layer], params.att_src[layer],
                                       params.att_dst[layer])]
        if layer < L - 1:
            h = nx.elu(nx.add(nx.concat_cols(outs), params.biases[layer]))
        else:
            total = outs[0]
            for o in outs[1:]:
                total = nx.add(total, o)
            h = nx.add(nx.scale(total, 1.0 / len(outs)), params.biases[layer])
    return h


def forward(params: ModelParams, blocks, X: GradTensor, dropout_masks=None) -> GradTensor:
    if isinstance(params, GcnParams):
        return gcn_forward(params, blocks, X, dropout_masks)
    return gat_forward(params, blocks, X, dropout_masks)


def dropout_masks(params: ModelParams, blocks: BlockStack, rng) -> Optional[list]:
    """Inverted-dropout masks for the hidden inputs of layers ``1..L-1``."""
    rate = params.config.dropout_rate
    if rate == 0.0:
        return None
    dims = layer_dims(params.config, _in_dim(params))
    masks: list = [None]
    for layer in range(1, len(blocks)):
        d_in = dims[layer][0]
        keep = rng.random((blocks[layer].num_src, d_in)) >= rate
        masks.append(keep / (1.0 - rate))
    return masks


def predict_proba(logits: GradTensor) -> np.ndarray:
    """Row softmax of the logits as a plain array, off any tape."""
    return nx.softmax_rows(nx.detach(logits)).values


def _in_dim(params: ModelParams) -> int:
    if isinstance(params, GcnParams):
        return params.weights[0].shape[0]
    return params.weights[0][0].shape[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams) -> None:
    """Write ``GNNP`` + arch tag + layer table + little-endian f64 payloads."""
    cfg = params.config
    dims = layer_dims(cfg, _in_dim(params))
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", _ARCH_TAGS[cfg.arch], len(dims))]
    parts += [struct.pack("<III", *d) for d in dims]
    parts += [np.ascontiguousarray(t.values, dtype="<f8").tobytes() for t in params.tensors()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, leaky_slope: float = 0.2, dropout_rate: float = 0.0) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    tag, num_layers = struct.unpack_from("<BI", data, 4)
    arch = {v: k for k, v in _ARCH_TAGS.items()}.get(tag)
    if arch is None:
        raise ValueError(f"{path}: unknown arch tag {tag}")
    offset = 9
    dims = []
    for _ in range(num_layers):
        dims.append(struct.unpack_from("<III", data, offset))
        offset += 12
    cfg = ModelConfig(
        arch=arch,
        num_layers=num_layers,
        hidden_dim=dims[0][1] if num_layers > 1 else 1,
        num_classes=dims[-1][1],
        heads=tuple(d[2] for d in dims) if arch == "gat" else 1,
        dropout_rate=dropout_rate,
        leaky_slope=leaky_slope,
    )
    params = init_params(cfg, dims[0][0], np.random.default_rng(0))
    for t in params.tensors():
        n = t.values.size
        t.values[...] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(t.shape)
        offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
