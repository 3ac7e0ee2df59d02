"""Fusion of per-meta-path embeddings into one vector per entity, with exact gradients.

The jitted ``fuse_forward``/``fuse_backward`` pair is the single implementation;
the training kernel in :mod:`herec.recommender` calls it directly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numba import njit


class FusionKind(enum.IntEnum):
    SIMPLE_LINEAR = 0
    PERSONALIZED_LINEAR = 1
    PERSONALIZED_NONLINEAR = 2

    @property
    def personalized(self) -> bool:
        return self is not FusionKind.SIMPLE_LINEAR

    @property
    def short(self) -> str:
        return ("sl", "pl", "pnl")[self]

    @classmethod
    def parse(cls, text) -> "FusionKind":
        if isinstance(text, FusionKind):
            return text
        key = str(text).strip().lower().replace("-", "_")
        aliases = {
            "sl": cls.SIMPLE_LINEAR, "simple_linear": cls.SIMPLE_LINEAR, "simplelinear": cls.SIMPLE_LINEAR,
            "pl": cls.PERSONALIZED_LINEAR, "personalized_linear": cls.PERSONALIZED_LINEAR,
            "personalizedlinear": cls.PERSONALIZED_LINEAR,
            "pnl": cls.PERSONALIZED_NONLINEAR, "personalized_nonlinear": cls.PERSONALIZED_NONLINEAR,
            "personalizednonlinear": cls.PERSONALIZED_NONLINEAR,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown fusion kind {text!r}") from None


@njit(cache=True)
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def fuse_forward(kind, E, M, B, w, zf, h, out):
    """Fill pre-activations ``zf`` (P, D), inner activations ``h`` and the output ``out`` (D,)."""
    P, D, d = M.shape
    for k in range(D):
        out[k] = 0.0
    for l in range(P):
        for k in range(D):
            z = B[l, k]
            for j in range(d):
                z += M[l, k, j] * E[l, j]
            zf[l, k] = z
            if kind == 2:
                h[l, k] = sigmoid(z)
            else:
                h[l, k] = z
    for l in range(P):
        c = 1.0 / P if kind == 0 else w[l]
        for k in range(D):
            out[k] += c * h[l, k]
    if kind == 2:
        for k in range(D):
            out[k] = sigmoid(out[k])


@njit(cache=True)
def fuse_backward(kind, E, w, h, out, g, dM, dB, dw):
    """Gradients of ``g . out`` w.r.t. M, B and w, written into the given buffers."""
    P, D, d = dM.shape
    gs = np.empty(D)
    for k in range(D):
        if kind == 2:
            gs[k] = g[k] * out[k] * (1.0 - out[k])
        else:
            gs[k] = g[k]
    for l in range(P):
        acc = 0.0
        for k in range(D):
            acc += gs[k] * h[l, k]
        dw[l] = acc if kind != 0 else 0.0
        c = 1.0 / P if kind == 0 else w[l]
        for k in range(D):
            dz = c * gs[k]
            if kind == 2:
                dz *= h[l, k] * (1.0 - h[l, k])
            dB[l, k] = dz
            for j in range(d):
                dM[l, k, j] = dz * E[l, j]


@dataclass
class FusionParams:
    """Per-meta-path transforms shared across entities, plus per-entity weights.

    ``M`` has shape (P, D, d), ``b`` (P, D); ``w`` is (n_entities, P) with row
    order given by ``ids``. ``w`` is ignored by the simple linear kind.
    """

    M: np.ndarray
    b: np.ndarray
    w: np.ndarray
    ids: list

    def __post_init__(self):
        self.index = {v: k for k, v in enumerate(self.ids)}

    @property
    def n_paths(self) -> int:
        return self.M.shape[0]

    @classmethod
    def init(cls, n_paths: int, D: int, d: int, ids, rng: np.random.Generator | None = None,
             scale: float = 0.1) -> "FusionParams":
        if rng is None:
            M = np.zeros((n_paths, D, d))
            b = np.zeros((n_paths, D))
        else:
            M = scale * rng.standard_normal((n_paths, D, d))
            b = scale * rng.standard_normal((n_paths, D))
        w = np.full((len(ids), n_paths), 1.0 / n_paths if n_paths else 0.0)
        return cls(M, b, w, list(ids))

    def weights_for(self, entity) -> np.ndarray:
        k = self.index.get(entity)
        if k is None:
            raise KeyError(f"no fusion weights for entity {entity!r}")
        return self.w[k]

    def sq_norm(self, kind) -> float:
        s = float(np.sum(self.M * self.M) + np.sum(self.b * self.b))
        if FusionKind.parse(kind).personalized:
            s += float(np.sum(self.w * self.w))
        return s


def _prepare(kind, embs, params: FusionParams, entity):
    kind = FusionKind.parse(kind)
    E = np.asarray(embs, dtype=np.float64)
    P, D, d = params.M.shape
    if E.ndim != 2 or E.shape != (P, d):
        raise ValueError(f"embeddings have shape {E.shape}, expected ({P}, {d})")
    if params.b.shape != (P, D):
        raise ValueError(f"bias has shape {params.b.shape}, expected ({P}, {D})")
    if kind.personalized:
        w = params.weights_for(entity)
    else:
        w = np.full(P, 1.0 / P)
    return kind, E, np.ascontiguousarray(w, dtype=np.float64)


def fuse(kind, embs, params: FusionParams, entity=None) -> np.ndarray:
    kind, E, w = _prepare(kind, embs, params, entity)
    P, D, _ = params.M.shape
    zf, h, out = np.empty((P, D)), np.empty((P, D)), np.empty(D)
    fuse_forward(int(kind), E, params.M, params.b, w, zf, h, out)
    return out


def fusion_gradients(kind, embs, params: FusionParams, entity, upstream) -> dict:
    """Partials of ``upstream . fuse(...)``: keys ``M`` (P, D, d), ``b`` (P, D), ``w`` (P,)."""
    kind, E, w = _prepare(kind, embs, params, entity)
    P, D, d = params.M.shape
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (D,):
        raise ValueError(f"upstream has shape {g.shape}, expected ({D},)")
    zf, h, out = np.empty((P, D)), np.empty((P, D)), np.empty(D)
    fuse_forward(int(kind), E, params.M, params.b, w, zf, h, out)
    dM, dB, dw = np.empty((P, D, d)), np.empty((P, D)), np.empty(P)
    fuse_backward(int(kind), E, w, h, out, g, dM, dB, dw)
    return {"M": dM, "b": dB, "w": dw}
