"""Fanout neighborhood sampling and graph-dropping augmentations."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError
from .graphstore import CsrGraph, _ranges, build_csr, undirected_edges

ALL = -1

FanoutSpec = Sequence[int]


def substream(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Independent generator for a named position in the run's random streams.

    String keys are hashed with CRC-32 so the derivation is stable across
    processes and machines.
    """
    spawn_key = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def check_fanouts(fanouts: FanoutSpec, num_layers: int | None = None) -> tuple[int, ...]:
    out = tuple(int(f) for f in fanouts)
    if not out:
        raise ConfigError("fanouts must name at least one layer")
    if any(f != ALL and f < 1 for f in out):
        raise ConfigError(f"each fanout must be >= 1 or ALL, got {list(out)}")
    if num_layers is not None and len(out) != num_layers:
        raise ConfigError(f"{len(out)} fanouts given for a {num_layers}-layer model")
    return out


@dataclass(frozen=True, eq=False)
class Block:
    """One layer of message passing.

    ``src_nodes`` starts with ``dst_nodes`` in the same order, so row ``i`` of
    the layer input is also the previous representation of destination ``i``.
    Edges are sorted by destination, then by global source id.
    """

    dst_nodes: np.ndarray
    src_nodes: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray

    @property
    def num_dst(self) -> int:
        return self.dst_nodes.size

    @property
    def num_src(self) -> int:
        return self.src_nodes.size

    def global_edges(self) -> np.ndarray:
        return np.stack([self.src_nodes[self.edge_src], self.dst_nodes[self.edge_dst]], axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Block):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("dst_nodes", "src_nodes", "edge_src", "edge_dst"))


@dataclass(frozen=True, eq=False)
class BlockStack:
    """Blocks ordered input-first; the last block's destinations are the targets."""

    blocks: tuple[Block, ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i) -> Block:
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    @property
    def input_nodes(self) -> np.ndarray:
        return self.blocks[0].src_nodes

    @property
    def targets(self) -> np.ndarray:
        return self.blocks[-1].dst_nodes

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockStack):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))


def _one_block(g: CsrGraph, dst: np.ndarray, fanout: int, rng) -> Block:
    starts, ends = g.offsets[dst], g.offsets[dst + 1]
    nbr = g.neighbors[_ranges(starts, ends)]
    owner = np.repeat(np.arange(dst.size, dtype=np.int64), ends - starts)
    not_self = nbr != dst[owner]
    nbr, owner = nbr[not_self], owner[not_self]

    if fanout != ALL:
        # uniform without replacement: keep the `fanout` smallest random keys per owner
        keys = rng.random(nbr.size)
        order = np.lexsort((keys, owner))
        counts = np.bincount(owner, minlength=dst.size)
        first = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(nbr.size) - first[owner[order]]
        chosen = np.sort(order[rank < fanout])
        nbr, owner = nbr[chosen], owner[chosen]

    nbr = np.concatenate([nbr, dst])
    owner = np.concatenate([owner, np.arange(dst.size, dtype=np.int64)])
    order = np.lexsort((nbr, owner))
    nbr, owner = nbr[order], owner[order]

    extra = np.setdiff1d(nbr, dst)
    src = np.concatenate([dst, extra])
    sorter = np.argsort(src, kind="stable")
    local = sorter[np.searchsorted(src, nbr, sorter=sorter)]
    return Block(dst.copy(), src, local.astype(np.int64), owner)


def sample_blocks(g: CsrGraph, targets, fanouts: FanoutSpec, rng=None) -> BlockStack:
    """Sample one neighborhood expansion of ``targets``.

    ``fanouts[l]`` caps the neighbors drawn for block ``l`` (input layer
    first).  Each destination keeps ``min(fanout, degree)`` distinct
    neighbors drawn uniformly without replacement, plus its self-edge.
    Layers are sampled from the targets outwards, each with fresh draws.
    """
    fanouts = check_fanouts(fanouts)
    dst = np.asarray(targets, dtype=np.int64).reshape(-1)
    if dst.size == 0:
        raise ConfigError("sample_blocks needs at least one target")
    if dst.min() < 0 or dst.max() >= g.num_nodes:
        raise IndexError("target id out of range")
    if np.unique(dst).size != dst.size:
        raise ConfigError("targets must be distinct")
    if rng is None and any(f != ALL for f in fanouts):
        raise ConfigError("an rng is required unless every fanout is ALL")
    blocks = []
    for fanout in reversed(fanouts):
        block = _one_block(g, dst, fanout, rng)
        blocks.append(block)
        dst = block.src_nodes
    return BlockStack(tuple(reversed(blocks)))


def full_blocks(g: CsrGraph, targets, num_layers: int) -> BlockStack:
    """The complete ``num_layers``-hop expansion (no sampling)."""
    return sample_blocks(g, targets, [ALL] * num_layers)


def drop_nodes(g: CsrGraph, drop_rate: float, protected, rng) -> tuple[CsrGraph, np.ndarray]:
    """Remove each unprotected node with probability ``drop_rate``.

    Dropped nodes keep their id but lose every incident edge.  Returns the
    new graph and the boolean mask of dropped nodes, whose feature rows the
    caller zeroes.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop_rate must be in [0, 1), got {drop_rate}")
    dropped = rng.random(g.num_nodes) < drop_rate
    prot = np.asarray(list(protected) if not isinstance(protected, np.ndarray) else protected,
                      dtype=np.int64)
    dropped[prot] = False
    if not dropped.any():
        return g, dropped
    e = g.edge_array()
    e = e[~(dropped[e[:, 0]] | dropped[e[:, 1]])]
    return build_csr(g.num_nodes, e, undirected=False), dropped


def drop_edges(g: CsrGraph, drop_rate: float, rng) -> CsrGraph:
    """Remove each undirected edge (both directions) with probability ``drop_rate``."""
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop_rate must be in [0, 1), got {drop_rate}")
    pairs = undirected_edges(g)
    keep = rng.random(pairs.shape[0]) >= drop_rate
    if keep.all():
        return g
    loops = g.edge_array()
    loops = loops[loops[:, 0] == loops[:, 1]]
    return build_csr(g.num_nodes, np.concatenate([pairs[keep], loops]), undirected=True)
