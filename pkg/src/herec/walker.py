"""Meta-path constrained random walks with type filtering."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .hin import DataError, HinGraph, MetaPath


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 40
    walks_per_node: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")


@dataclass
class WalkCorpus:
    meta_path: MetaPath
    sequences: list = field(default_factory=list)
    n_discarded: int = 0  # walks that dead-ended at the start node

    @property
    def target_type(self) -> str:
        return self.meta_path.target

    def __len__(self):
        return len(self.sequences)


def transition_distribution(g: HinGraph, v: str, next_type: str) -> dict:
    nbrs = g.adjacency.get((v, next_type), ())
    if not nbrs:
        return {}
    p = 1.0 / len(nbrs)
    return {x: p for x in nbrs}


def node_key(node_id: str) -> int:
    """Stable 64-bit key for a node id, independent of graph composition."""
    return int.from_bytes(hashlib.blake2b(node_id.encode("utf-8"), digest_size=8).digest(), "little")


def walk_rng(seed: int, node_id: str, walk_index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, node_key(node_id), walk_index])


def _walk(g: HinGraph, start: str, mp: MetaPath, wl: int, rng: np.random.Generator):
    """Return (filtered, full) sequences for one walk."""
    types = mp.types
    period = len(types) - 1
    target = types[0]
    # enough uniforms for the longest possible walk; drawn up front so the
    # stream consumption does not depend on the graph
    draws = rng.random((wl - 1) * period + period)
    adj = g.adjacency
    kept, full = [start], [start]
    v, pos, step = start, 0, 0
    while len(kept) < wl:
        nt = types[pos + 1]
        nbrs = adj.get((v, nt))
        if not nbrs:
            break
        v = nbrs[int(draws[step] * len(nbrs))]
        step += 1
        full.append(v)
        pos = (pos + 1) % period
        if nt == target:
            kept.append(v)
    return kept, full


def generate_walk(g: HinGraph, start: str, mp: MetaPath, cfg: WalkConfig, rng: np.random.Generator,
                  full: bool = False) -> list:
    """One filtered walk from ``start``; with ``full=True`` return the unfiltered node sequence."""
    if start not in g.node_type:
        raise KeyError(f"unknown node id {start!r}")
    if g.node_type[start] != mp.target:
        raise DataError(f"start node {start!r} has type {g.node_type[start]}, meta-path {mp} needs {mp.target}")
    kept, seq = _walk(g, start, mp, cfg.walk_length, rng)
    return seq if full else kept


def generate_corpus(g: HinGraph, mp: MetaPath, cfg: WalkConfig) -> WalkCorpus:
    corpus = WalkCorpus(mp)
    for v in g.nodes_of_type(mp.target):
        for k in range(cfg.walks_per_node):
            kept, _ = _walk(g, v, mp, cfg.walk_length, walk_rng(cfg.seed, v, k))
            if len(kept) < 2:
                corpus.n_discarded += 1
                continue
            corpus.sequences.append(kept)
    return corpus


def write_corpus(corpus: WalkCorpus, out: TextIO):
    for seq in corpus.sequences:
        out.write(" ".join(seq))
        out.write("\n")
