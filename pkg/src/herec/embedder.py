"""Skip-gram with negative sampling over filtered walk corpora, plus word2vec text I/O."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .hin import HinGraph, MetaPath
from .walker import WalkConfig, WalkCorpus, generate_corpus, node_key

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr0: float = 0.025
    lr_min: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.window < 1 or self.negatives < 1 or self.epochs < 1:
            raise ValueError("dim, window, negatives and epochs must all be >= 1")
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError("need 0 < lr_min <= lr0")


@dataclass
class EmbeddingMatrix:
    ids: list
    vectors: np.ndarray  # (n, d) input vectors
    context: np.ndarray | None = None  # (n, d) output vectors, training only
    losses: list = field(default_factory=list)  # mean pair loss per epoch

    def __post_init__(self):
        self.index = {v: k for k, v in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __getitem__(self, node_id):
        return self.vectors[self.index[node_id]]

    def get(self, node_id, default=None):
        k = self.index.get(node_id)
        return default if k is None else self.vectors[k]


@dataclass
class EmbeddingSet:
    target_type: str
    matrices: dict  # meta-path label -> EmbeddingMatrix, insertion order is fusion order
    missing: dict = field(default_factory=dict)  # label -> ids given zero vectors

    @property
    def labels(self) -> list:
        return list(self.matrices)

    @property
    def dim(self) -> int:
        return next(iter(self.matrices.values())).dim

    def stacked(self, ids) -> np.ndarray:
        """(len(ids), n_paths, d) array; ids unknown to a matrix get zeros."""
        out = np.zeros((len(ids), len(self.matrices), self.dim))
        for l, mat in enumerate(self.matrices.values()):
            for k, v in enumerate(ids):
                j = mat.index.get(v)
                if j is not None:
                    out[k, l] = mat.vectors[j]
        return out

    def subset(self, labels) -> "EmbeddingSet":
        return EmbeddingSet(self.target_type, {l: self.matrices[l] for l in labels},
                            {l: self.missing.get(l, []) for l in labels})


def context_pairs(corpus, window: int):
    """Yield (center, context) for every position pair within ``window`` of each other."""
    sequences = corpus.sequences if isinstance(corpus, WalkCorpus) else corpus
    for seq in sequences:
        n = len(seq)
        for i in range(n):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if j != i:
                    yield seq[i], seq[j]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sgns_pair_loss(v, u_pos, u_negs) -> float:
    """Negative-sampling loss of one (center, context) pair with given negatives."""
    loss = np.logaddexp(0.0, -(u_pos @ v))
    for u in u_negs:
        loss += np.logaddexp(0.0, u @ v)
    return float(loss)


def sgns_pair_grad(v, u_pos, u_negs):
    """Gradients of :func:`sgns_pair_loss` w.r.t. center, positive context and each negative."""
    g_pos = _sigmoid(u_pos @ v) - 1.0
    dv = g_pos * u_pos
    du_pos = g_pos * v
    du_negs = []
    for u in u_negs:
        s = _sigmoid(u @ v)
        dv = dv + s * u
        du_negs.append(s * v)
    return dv, du_pos, du_negs


@njit(cache=True)
def _xorshift(state):
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return x * np.uint64(2685821657736338717)


@njit(cache=True)
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True)
def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True, fastmath=True)
def _dot_row(v, w, r):
    s = 0.0
    for k in range(v.shape[0]):
        s += v[k] * w[r, k]
    return s


@njit(cache=True)
def _sgns_epoch(tokens, offsets, window, negatives, w_in, w_out, table, rng_state,
                lr0, lr_min, done, total):
    d = w_in.shape[1]
    grad_v = np.zeros(d)
    v = np.empty(d)
    n_table = np.uint64(table.shape[0])
    loss_sum = 0.0
    n_pairs = 0
    n_seq = offsets.shape[0] - 1
    for s in range(n_seq):
        lo = offsets[s]
        hi = offsets[s + 1]
        for i in range(lo, hi):
            c = tokens[i]
            j0 = max(lo, i - window)
            j1 = min(hi, i + window + 1)
            for j in range(j0, j1):
                if j == i:
                    continue
                lr = lr0 - (lr0 - lr_min) * (done / total)
                if lr < lr_min:
                    lr = lr_min
                o = tokens[j]
                for k in range(d):
                    grad_v[k] = 0.0
                    v[k] = w_in[c, k]
                for t in range(negatives + 1):
                    if t == 0:
                        target = o
                        label = 1.0
                    else:
                        target = table[(_xorshift(rng_state) >> np.uint64(16)) % n_table]
                        if target == o:
                            continue
                        label = 0.0
                    dot = _dot_row(v, w_out, target)
                    if label > 0.0:
                        loss_sum -= _log_sigmoid(dot)
                    else:
                        loss_sum -= _log_sigmoid(-dot)
                    g = _sig(dot) - label
                    for k in range(d):
                        grad_v[k] += g * w_out[target, k]
                        w_out[target, k] -= lr * g * v[k]
                for k in range(d):
                    w_in[c, k] = v[k] - lr * grad_v[k]
                done += 1.0
                n_pairs += 1
    return loss_sum, n_pairs


def unigram_table(tokens, n_vocab: int, size: int = 1_000_000, power: float = 0.75) -> np.ndarray:
    """Lookup table whose uniform sampling follows the smoothed unigram distribution."""
    counts = np.bincount(tokens, minlength=n_vocab).astype(np.float64) ** power
    cdf = np.cumsum(counts / counts.sum())
    pos = (np.arange(size) + 0.5) / size
    return np.minimum(np.searchsorted(cdf, pos, side="right"), n_vocab - 1).astype(np.int64)


def _encode(corpus: WalkCorpus):
    vocab = sorted({v for seq in corpus.sequences for v in seq})
    index = {v: k for k, v in enumerate(vocab)}
    lengths = [len(s) for s in corpus.sequences]
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    tokens = np.fromiter((index[v] for seq in corpus.sequences for v in seq), dtype=np.int64,
                         count=int(offsets[-1]))
    return vocab, tokens, offsets


def _count_pairs(offsets, window):
    total = 0
    for n in np.diff(offsets):
        n = int(n)
        for i in range(n):
            total += min(n, i + window + 1) - max(0, i - window) - 1
    return total


def train_skipgram(corpus: WalkCorpus, cfg: EmbedConfig, callback=None) -> EmbeddingMatrix:
    """Fit input/context vectors on the corpus; returns the input table.

    ``callback(epoch, matrix)`` is invoked after every epoch with the live
    (not copied) embedding matrix.
    """
    seqs = [s for s in corpus.sequences if len(s) >= 2]
    if not seqs:
        raise ValueError(f"empty corpus for meta-path {corpus.meta_path}")
    corpus = WalkCorpus(corpus.meta_path, seqs)
    vocab, tokens, offsets = _encode(corpus)
    n, d = len(vocab), cfg.dim

    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, 1])
    w_in = rng.standard_normal((n, d)) / d
    w_out = np.zeros((n, d))

    table = unigram_table(tokens, n)
    state = np.array([int(rng.integers(1, 2**63))], dtype=np.uint64)

    total = float(_count_pairs(offsets, cfg.window) * cfg.epochs)
    done = 0.0
    mat = EmbeddingMatrix(vocab, w_in, w_out)
    for epoch in range(cfg.epochs):
        loss_sum, n_pairs = _sgns_epoch(tokens, offsets, cfg.window, cfg.negatives, w_in, w_out,
                                        table, state, cfg.lr0, cfg.lr_min, done, total)
        done += n_pairs
        mean_loss = loss_sum / max(n_pairs, 1)
        if not math.isfinite(mean_loss) or not np.isfinite(w_in).all():
            raise DivergenceError(f"skip-gram loss became non-finite at epoch {epoch + 1}")
        mat.losses.append(mean_loss)
        log.debug("%s epoch %d loss %.5f", corpus.meta_path, epoch + 1, mean_loss)
        if callback is not None:
            callback(epoch + 1, mat)
    return mat


def _path_seed(seed: int, mp: MetaPath) -> int:
    return (seed ^ node_key(mp.label)) & 0x7FFFFFFFFFFFFFFF


def _embed_one(g: HinGraph, mp: MetaPath, wcfg: WalkConfig, ecfg: EmbedConfig):
    corpus = generate_corpus(g, mp, WalkConfig(wcfg.walk_length, wcfg.walks_per_node,
                                               _path_seed(wcfg.seed, mp)))
    mat = train_skipgram(corpus, EmbedConfig(ecfg.dim, ecfg.window, ecfg.negatives, ecfg.epochs,
                                             ecfg.lr0, ecfg.lr_min, _path_seed(ecfg.seed, mp)))
    targets = g.nodes_of_type(mp.target)
    vectors = np.zeros((len(targets), ecfg.dim))
    missing = []
    for k, v in enumerate(targets):
        j = mat.index.get(v)
        if j is None:
            missing.append(v)
        else:
            vectors[k] = mat.vectors[j]
    return EmbeddingMatrix(targets, vectors, losses=mat.losses), missing


def embed_all(g: HinGraph, meta_paths, wcfg: WalkConfig, ecfg: EmbedConfig, workers: int = 1) -> EmbeddingSet:
    """One embedding matrix per meta-path; all paths must share a target type."""
    meta_paths = list(meta_paths)
    if not meta_paths:
        raise ValueError("no meta-paths given")
    targets = {mp.target for mp in meta_paths}
    if len(targets) != 1:
        raise ValueError(f"meta-paths mix target types {sorted(targets)}")
    if workers > 1 and len(meta_paths) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(meta_paths))) as pool:
            futures = [pool.submit(_embed_one, g, mp, wcfg, ecfg) for mp in meta_paths]
            results = [f.result() for f in futures]
    else:
        results = [_embed_one(g, mp, wcfg, ecfg) for mp in meta_paths]
    emb = EmbeddingSet(targets.pop(), {})
    for mp, (mat, missing) in zip(meta_paths, results):
        emb.matrices[mp.label] = mat
        emb.missing[mp.label] = missing
        if missing:
            log.info("meta-path %s: %d target nodes never visited, zero vectors", mp, len(missing))
    return emb


def write_word2vec(mat: EmbeddingMatrix, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(mat.ids)} {mat.dim}\n")
        for v, vec in zip(mat.ids, mat.vectors):
            fh.write(v + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def read_word2vec(path) -> EmbeddingMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        n, d = int(header[0]), int(header[1])
        ids, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d + 1:
                raise ValueError(f"{path}: expected {d} values for {parts[0]!r}")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(ids) != n:
        raise ValueError(f"{path}: header declares {n} vectors, found {len(ids)}")
    return EmbeddingMatrix(ids, np.array(rows, dtype=np.float64).reshape(n, d))


def save_embeddings(emb: EmbeddingSet, directory) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for label, mat in emb.matrices.items():
        p = os.path.join(directory, f"{label}.emb")
        write_word2vec(mat, p)
        paths.append(p)
    with open(os.path.join(directory, f"{emb.target_type}.coverage.json"), "w") as fh:
        json.dump({"target_type": emb.target_type, "meta_paths": emb.labels,
                   "missing": emb.missing}, fh, indent=1)
    return paths


def load_embeddings(directory, target_type: str, labels=None) -> EmbeddingSet:
    with open(os.path.join(directory, f"{target_type}.coverage.json")) as fh:
        meta = json.load(fh)
    labels = meta["meta_paths"] if labels is None else list(labels)
    emb = EmbeddingSet(target_type, {})
    for label in labels:
        emb.matrices[label] = read_word2vec(os.path.join(directory, f"{label}.emb"))
        emb.missing[label] = meta["missing"].get(label, [])
    return emb
