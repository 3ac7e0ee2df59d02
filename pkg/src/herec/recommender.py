"""Matrix factorization extended with fused HIN embeddings, trained by SGD.

Two trainers live here: :class:`HerecModel` (latent factors plus pairing
factors against fused embeddings) and :class:`MFModel`, the plain dot-product
baseline. Both draw initial factors and sampling order from the same seeded
streams so that with zero integration weights their x/y trajectories coincide.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numba import njit

from .embedder import DivergenceError, EmbeddingSet
from .fusion import FusionKind, FusionParams, fuse, fuse_backward, fuse_forward, fusion_gradients
from .hin import RatingDataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    D: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.01
    lam_theta: float = 0.01
    lam_gamma: float = 0.01
    eta: float = 0.01
    epochs: int = 100
    seed: int = 0
    tol: float = 1e-5  # relative objective change counted as stalled
    patience: int = 3  # consecutive stalled epochs before stopping; 0 disables
    init_scale: float = 0.1

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if min(self.lam, self.lam_theta, self.lam_gamma) < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def replace(self, **kw) -> "HyperParams":
        return HyperParams(**{**asdict(self), **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def objectives(self) -> list:
        return [r["objective"] for r in self.rows]

    def write_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------- kernels


@njit(cache=True)
def _mf_epoch(su, si, sr, x, y, lam, eta):
    D = x.shape[1]
    for t in range(su.shape[0]):
        u = su[t]
        i = si[t]
        pred = 0.0
        for k in range(D):
            pred += x[u, k] * y[i, k]
        err = sr[t] - pred
        for k in range(D):
            xk = x[u, k]
            yk = y[i, k]
            x[u, k] = xk + eta * (err * yk - lam * xk)
            y[i, k] = yk + eta * (err * xk - lam * yk)
    return 0


@njit(cache=True)
def _side_forward(kind, E, M, B, w, zf, h, e):
    if M.shape[0] == 0:
        for k in range(e.shape[0]):
            e[k] = 0.0
    else:
        fuse_forward(kind, E, M, B, w, zf, h, e)


@njit(cache=True)
def _side_update(kind, E, M, B, w, h, e, g, dM, dB, dw, lam_theta, eta):
    P = M.shape[0]
    if P == 0:
        return
    fuse_backward(kind, E, w, h, e, g, dM, dB, dw)
    D = M.shape[1]
    d = M.shape[2]
    for l in range(P):
        for k in range(D):
            B[l, k] += eta * (dB[l, k] - lam_theta * B[l, k])
            for j in range(d):
                M[l, k, j] += eta * (dM[l, k, j] - lam_theta * M[l, k, j])
        if kind != 0:
            w[l] += eta * (dw[l] - lam_theta * w[l])


@njit(cache=True)
def _herec_epoch(su, si, sr, x, y, gu, gi, EU, MU, BU, WU, EI, MI, BI, WI,
                 kind, alpha, beta, lam, lam_theta, lam_gamma, eta):
    D = x.shape[1]
    Pu = MU.shape[0]
    Pi = MI.shape[0]
    zfu = np.empty((Pu, D))
    hu = np.empty((Pu, D))
    eu = np.empty(D)
    zfi = np.empty((Pi, D))
    hi = np.empty((Pi, D))
    ei = np.empty(D)
    dMU = np.empty(MU.shape)
    dBU = np.empty(BU.shape)
    dwu = np.empty(Pu)
    dMI = np.empty(MI.shape)
    dBI = np.empty(BI.shape)
    dwi = np.empty(Pi)
    g_u = np.empty(D)
    g_i = np.empty(D)
    for t in range(su.shape[0]):
        u = su[t]
        i = si[t]
        _side_forward(kind, EU[u], MU, BU, WU[u], zfu, hu, eu)
        _side_forward(kind, EI[i], MI, BI, WI[i], zfi, hi, ei)
        pred = 0.0
        for k in range(D):
            pred += x[u, k] * y[i, k]
        a = 0.0
        b = 0.0
        for k in range(D):
            a += eu[k] * gi[i, k]
            b += gu[u, k] * ei[k]
        pred = pred + alpha * a + beta * b
        err = sr[t] - pred
        if not math.isfinite(err):
            return t
        # upstream gradients into the fused vectors use pre-step pairing factors
        for k in range(D):
            g_u[k] = alpha * err * gi[i, k]
            g_i[k] = beta * err * gu[u, k]
        _side_update(kind, EU[u], MU, BU, WU[u], hu, eu, g_u, dMU, dBU, dwu, lam_theta, eta)
        _side_update(kind, EI[i], MI, BI, WI[i], hi, ei, g_i, dMI, dBI, dwi, lam_theta, eta)
        for k in range(D):
            guk = gu[u, k]
            gik = gi[i, k]
            gu[u, k] = guk + eta * (beta * err * ei[k] - lam_gamma * guk)
            gi[i, k] = gik + eta * (alpha * err * eu[k] - lam_gamma * gik)
        for k in range(D):
            xk = x[u, k]
            yk = y[i, k]
            x[u, k] = xk + eta * (err * yk - lam * xk)
            y[i, k] = yk + eta * (err * xk - lam * yk)
    return -1


@njit(cache=True)
def _fused_all(kind, E, M, B, W):
    n = E.shape[0]
    P, D = B.shape[0], B.shape[1]
    out = np.zeros((n, D))
    zf = np.empty((P, D))
    h = np.empty((P, D))
    e = np.empty(D)
    if P == 0:
        return out
    for v in range(n):
        fuse_forward(kind, E[v], M, B, W[v], zf, h, e)
        for k in range(D):
            out[v, k] = e[k]
    return out


# --------------------------------------------------------------------------- models


def _index_order(primary, extra=()):
    """Training entities first (sorted), then embedding-only entities (sorted)."""
    first = sorted(set(primary))
    seen = set(first)
    return first + sorted(v for v in set(extra) if v not in seen)


def _streams(seed: int):
    ss = np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF)
    init_xy, init_aux, sample = ss.spawn(3)
    return (np.random.default_rng(init_xy), np.random.default_rng(init_aux),
            np.random.default_rng(sample))


def _encode_ratings(model, ds: RatingDataset):
    u = np.fromiter((model.user_index[r.user] for r in ds.records), dtype=np.int64, count=len(ds))
    i = np.fromiter((model.item_index[r.item] for r in ds.records), dtype=np.int64, count=len(ds))
    r = np.fromiter((r.rating for r in ds.records), dtype=np.float64, count=len(ds))
    return u, i, r


def _rowdot(a, b):
    return np.einsum("nk,nk->n", a, b)


class _Base:
    users: list
    items: list
    hyper: HyperParams
    scale: tuple
    global_mean: float

    def _build_index(self):
        self.user_index = {v: k for k, v in enumerate(self.users)}
        self.item_index = {v: k for k, v in enumerate(self.items)}

    def _init_xy(self, rng, n_train_users, n_train_items):
        D, s = self.hyper.D, self.hyper.init_scale
        self.x = np.zeros((len(self.users), D))
        self.y = np.zeros((len(self.items), D))
        self.x[:n_train_users] = s * rng.standard_normal((n_train_users, D))
        self.y[:n_train_items] = s * rng.standard_normal((n_train_items, D))

    def clip(self, value):
        lo, hi = self.scale
        return np.clip(value, lo, hi)

    def predict_many(self, pairs, clip: bool = True) -> np.ndarray:
        pairs = list(pairs)
        out = np.empty(len(pairs))
        uk = np.array([self.user_index.get(u, -1) for u, _ in pairs], dtype=np.int64)
        ik = np.array([self.item_index.get(i, -1) for _, i in pairs], dtype=np.int64)
        raw = self._raw_indexed(np.maximum(uk, 0), np.maximum(ik, 0), uk >= 0, ik >= 0)
        both_unknown = (uk < 0) & (ik < 0)
        raw[both_unknown] = self.global_mean
        out[:] = raw
        return self.clip(out) if clip else out

    def predict(self, u, i, clip: bool = True) -> float:
        return float(self.predict_many([(u, i)], clip=clip)[0])

    def _fit(self, ds: RatingDataset, epoch_fn, callback=None) -> TrainReport:
        if len(ds) == 0:
            raise ValueError("training set is empty")
        su_all, si_all, sr_all = _encode_ratings(self, ds)
        report = TrainReport()
        stalled = 0
        prev = None
        for epoch in range(1, self.hyper.epochs + 1):
            t0 = time.perf_counter()
            pick = self._sample_rng.integers(0, len(ds), size=len(ds))
            epoch_fn(su_all[pick], si_all[pick], sr_all[pick])
            with np.errstate(over="ignore", invalid="ignore"):
                obj = self.objective(ds)
            if not math.isfinite(obj):
                raise DivergenceError(f"objective became non-finite at epoch {epoch}")
            row = {"epoch": epoch, "objective": obj, "seconds": time.perf_counter() - t0}
            row.update(self.norms())
            report.rows.append(row)
            if callback is not None:
                callback(epoch, self)
            if prev is not None and self.hyper.patience > 0:
                rel = abs(prev - obj) / max(abs(prev), 1e-300)
                stalled = stalled + 1 if rel < self.hyper.tol else 0
                if stalled >= self.hyper.patience:
                    report.stopped_early = True
                    break
            prev = obj
        return report


class MFModel(_Base):
    """Plain dot-product matrix factorization (the baseline predictor)."""

    def __init__(self, train: RatingDataset, hyper: HyperParams):
        self.hyper = hyper
        self.scale = tuple(train.scale)
        self.global_mean = train.mean()
        self.users = _index_order(train.users())
        self.items = _index_order(train.items())
        self._build_index()
        self.n_train_users, self.n_train_items = len(self.users), len(self.items)
        self.x = np.zeros((len(self.users), hyper.D))
        self.y = np.zeros((len(self.items), hyper.D))

    def _raw_indexed(self, uk, ik, u_ok, i_ok):
        x = self.x[uk] * u_ok[:, None]
        y = self.y[ik] * i_ok[:, None]
        return _rowdot(x, y)

    def objective(self, ds: RatingDataset) -> float:
        u, i, r = _encode_ratings(self, ds)
        err = r - _rowdot(self.x[u], self.y[i])
        h = self.hyper
        return float(err @ err + h.lam * (np.sum(self.x ** 2) + np.sum(self.y ** 2)))

    def norms(self) -> dict:
        return {"norm_x": float(np.linalg.norm(self.x)), "norm_y": float(np.linalg.norm(self.y))}

    def train(self, ds: RatingDataset, callback=None) -> TrainReport:
        rng_xy, _, self._sample_rng = _streams(self.hyper.seed)
        self._init_xy(rng_xy, self.n_train_users, self.n_train_items)
        h = self.hyper
        return self._fit(ds, lambda su, si, sr: _mf_epoch(su, si, sr, self.x, self.y, h.lam, h.eta),
                         callback)


class HerecModel(_Base):
    """Latent factors, pairing factors and fusion parameters for both sides."""

    def __init__(self, train: RatingDataset, user_emb: EmbeddingSet | None, item_emb: EmbeddingSet | None,
                 kind=FusionKind.PERSONALIZED_NONLINEAR, hyper: HyperParams = HyperParams()):
        self.hyper = hyper
        self.kind = FusionKind.parse(kind)
        self.scale = tuple(train.scale)
        self.global_mean = train.mean()
        dims = {e.dim for e in (user_emb, item_emb) if e is not None and e.matrices}
        if len(dims) > 1:
            raise ValueError(f"user and item embeddings differ in dimension: {sorted(dims)}")
        self.d = dims.pop() if dims else 1
        u_extra = user_emb.matrices[user_emb.labels[0]].ids if user_emb and user_emb.matrices else ()
        i_extra = item_emb.matrices[item_emb.labels[0]].ids if item_emb and item_emb.matrices else ()
        self.users = _index_order(train.users(), u_extra)
        self.items = _index_order(train.items(), i_extra)
        self._build_index()
        self.n_train_users, self.n_train_items = len(train.users()), len(train.items())
        self.user_paths = list(user_emb.labels) if user_emb else []
        self.item_paths = list(item_emb.labels) if item_emb else []
        self.EU = user_emb.stacked(self.users) if self.user_paths else np.zeros((len(self.users), 0, self.d))
        self.EI = item_emb.stacked(self.items) if self.item_paths else np.zeros((len(self.items), 0, self.d))
        D = hyper.D
        self.x = np.zeros((len(self.users), D))
        self.y = np.zeros((len(self.items), D))
        self.gu = np.zeros((len(self.users), D))
        self.gi = np.zeros((len(self.items), D))
        self.theta_u = FusionParams.init(len(self.user_paths), D, self.d, self.users)
        self.theta_i = FusionParams.init(len(self.item_paths), D, self.d, self.items)
        self.provenance: dict = {}

    # -- prediction -----------------------------------------------------------

    def fused_users(self) -> np.ndarray:
        t = self.theta_u
        return _fused_all(int(self.kind), self.EU, t.M, t.b, t.w)

    def fused_items(self) -> np.ndarray:
        t = self.theta_i
        return _fused_all(int(self.kind), self.EI, t.M, t.b, t.w)

    def fused_user(self, u) -> np.ndarray:
        if not self.user_paths:
            return np.zeros(self.hyper.D)
        k = self.user_index[u]
        return fuse(self.kind, self.EU[k], self.theta_u, u)

    def fused_item(self, i) -> np.ndarray:
        if not self.item_paths:
            return np.zeros(self.hyper.D)
        k = self.item_index[i]
        return fuse(self.kind, self.EI[k], self.theta_i, i)

    def _raw_indexed(self, uk, ik, u_ok, i_ok):
        h = self.hyper
        eu, ei = self.fused_users()[uk], self.fused_items()[ik]
        x, gu, eu = (a * u_ok[:, None] for a in (self.x[uk], self.gu[uk], eu))
        y, gi, ei = (a * i_ok[:, None] for a in (self.y[ik], self.gi[ik], ei))
        return _rowdot(x, y) + h.alpha * _rowdot(eu, gi) + h.beta * _rowdot(gu, ei)

    # -- objective ------------------------------------------------------------

    def objective(self, ds: RatingDataset) -> float:
        h = self.hyper
        if len(ds):
            u, i, r = _encode_ratings(self, ds)
            ok = np.ones(len(u), dtype=bool)
            err = r - self._raw_indexed(u, i, ok, ok)
            loss = float(err @ err)
        else:
            loss = 0.0
        reg = h.lam * (np.sum(self.x ** 2) + np.sum(self.y ** 2))
        reg += h.lam_gamma * (np.sum(self.gu ** 2) + np.sum(self.gi ** 2))
        reg += h.lam_theta * (self.theta_u.sq_norm(self.kind) + self.theta_i.sq_norm(self.kind))
        return float(loss + reg)

    def objective_gradients(self, ds: RatingDataset) -> dict:
        """Analytic gradient of :meth:`objective` w.r.t. every parameter block."""
        h = self.hyper
        g = {
            "x": 2 * h.lam * self.x, "y": 2 * h.lam * self.y,
            "gu": 2 * h.lam_gamma * self.gu, "gi": 2 * h.lam_gamma * self.gi,
            "MU": 2 * h.lam_theta * self.theta_u.M, "bU": 2 * h.lam_theta * self.theta_u.b,
            "MI": 2 * h.lam_theta * self.theta_i.M, "bI": 2 * h.lam_theta * self.theta_i.b,
        }
        personal = self.kind.personalized
        g["wU"] = 2 * h.lam_theta * self.theta_u.w if personal else np.zeros_like(self.theta_u.w)
        g["wI"] = 2 * h.lam_theta * self.theta_i.w if personal else np.zeros_like(self.theta_i.w)
        for rec in ds.records:
            u, i = self.user_index[rec.user], self.item_index[rec.item]
            eu, ei = self.fused_user(rec.user), self.fused_item(rec.item)
            pred = self.x[u] @ self.y[i] + h.alpha * (eu @ self.gi[i]) + h.beta * (self.gu[u] @ ei)
            c = -2.0 * (rec.rating - pred)  # d loss / d prediction
            g["x"][u] += c * self.y[i]
            g["y"][i] += c * self.x[u]
            g["gu"][u] += c * h.beta * ei
            g["gi"][i] += c * h.alpha * eu
            if self.user_paths:
                gr = fusion_gradients(self.kind, self.EU[u], self.theta_u, rec.user, c * h.alpha * self.gi[i])
                g["MU"] += gr["M"]
                g["bU"] += gr["b"]
                g["wU"][u] += gr["w"]
            if self.item_paths:
                gr = fusion_gradients(self.kind, self.EI[i], self.theta_i, rec.item, c * h.beta * self.gu[u])
                g["MI"] += gr["M"]
                g["bI"] += gr["b"]
                g["wI"][i] += gr["w"]
        return g

    def parameter_blocks(self) -> dict:
        """Live views of all trainable arrays, keyed like :meth:`objective_gradients`."""
        return {"x": self.x, "y": self.y, "gu": self.gu, "gi": self.gi,
                "MU": self.theta_u.M, "bU": self.theta_u.b, "wU": self.theta_u.w,
                "MI": self.theta_i.M, "bI": self.theta_i.b, "wI": self.theta_i.w}

    def norms(self) -> dict:
        return {
            "norm_x": float(np.linalg.norm(self.x)), "norm_y": float(np.linalg.norm(self.y)),
            "norm_gamma": float(math.sqrt(np.sum(self.gu ** 2) + np.sum(self.gi ** 2))),
            "norm_theta": float(math.sqrt(self.theta_u.sq_norm(self.kind) + self.theta_i.sq_norm(self.kind))),
        }

    # -- training -------------------------------------------------------------

    def initialize(self):
        rng_xy, rng_aux, self._sample_rng = _streams(self.hyper.seed)
        self._init_xy(rng_xy, self.n_train_users, self.n_train_items)
        D, s = self.hyper.D, self.hyper.init_scale
        self.gu[:] = 0.0
        self.gi[:] = 0.0
        self.gu[:self.n_train_users] = s * rng_aux.standard_normal((self.n_train_users, D))
        self.gi[:self.n_train_items] = s * rng_aux.standard_normal((self.n_train_items, D))
        self.theta_u = FusionParams.init(len(self.user_paths), D, self.d, self.users, rng_aux, s)
        self.theta_i = FusionParams.init(len(self.item_paths), D, self.d, self.items, rng_aux, s)

    def _epoch(self, su, si, sr):
        h, tu, ti = self.hyper, self.theta_u, self.theta_i
        bad = _herec_epoch(su, si, sr, self.x, self.y, self.gu, self.gi,
                           self.EU, tu.M, tu.b, tu.w, self.EI, ti.M, ti.b, ti.w,
                           int(self.kind), h.alpha, h.beta, h.lam, h.lam_theta, h.lam_gamma, h.eta)
        if bad >= 0:
            raise DivergenceError(f"non-finite prediction error at sample {bad}; lower eta")

    def sgd_step(self, user, item, rating):
        """One simultaneous update of every parameter touched by the triple."""
        u, i = self.user_index[user], self.item_index[item]
        self._epoch(np.array([u]), np.array([i]), np.array([float(rating)]))
        for a in self.parameter_blocks().values():
            if not np.isfinite(a).all():
                raise DivergenceError("non-finite parameter after SGD step")

    def train(self, ds: RatingDataset, callback=None) -> TrainReport:
        self.initialize()
        return self._fit(ds, self._epoch, callback)


def predict_base(model, u, i) -> float:
    """Plain dot product of latent factors; zero vectors for unknown ids."""
    x = model.x[model.user_index[u]] if u in model.user_index else np.zeros(model.hyper.D)
    y = model.y[model.item_index[i]] if i in model.item_index else np.zeros(model.hyper.D)
    return float(_rowdot(x[None], y[None])[0])


def objective(model, ds: RatingDataset) -> float:
    return model.objective(ds)


def train(model, ds: RatingDataset, callback=None) -> TrainReport:
    return model.train(ds, callback)


# --------------------------------------------------------------------------- persistence


def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(block: dict) -> np.ndarray:
    raw = base64.b64decode(block["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(block["shape"]).copy()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_model(model, path):
    is_herec = isinstance(model, HerecModel)
    doc = {
        "format": "herec-model",
        "version": FORMAT_VERSION,
        "model": "herec" if is_herec else "mf",
        "hyper": asdict(model.hyper),
        "scale": list(model.scale),
        "global_mean": model.global_mean,
        "users": model.users,
        "items": model.items,
        "n_train": [model.n_train_users, model.n_train_items],
        "blocks": {"x": _pack(model.x), "y": _pack(model.y)},
    }
    if is_herec:
        doc.update({
            "fusion": model.kind.name,
            "D": model.hyper.D,
            "d": model.d,
            "user_paths": model.user_paths,
            "item_paths": model.item_paths,
            "embeddings": model.provenance,
        })
        doc["blocks"].update({
            "gu": _pack(model.gu), "gi": _pack(model.gi), "EU": _pack(model.EU), "EI": _pack(model.EI),
            "MU": _pack(model.theta_u.M), "bU": _pack(model.theta_u.b), "wU": _pack(model.theta_u.w),
            "MI": _pack(model.theta_i.M), "bI": _pack(model.theta_i.b), "wI": _pack(model.theta_i.w),
        })
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "herec-model":
        raise ValueError(f"{path} is not a model file")
    if doc["version"] > FORMAT_VERSION:
        raise ValueError(f"model format version {doc['version']} is newer than supported {FORMAT_VERSION}")
    hyper = HyperParams.from_dict(doc["hyper"])
    blocks = {k: _unpack(v) for k, v in doc["blocks"].items()}
    cls = HerecModel if doc["model"] == "herec" else MFModel
    model = cls.__new__(cls)
    model.hyper = hyper
    model.scale = tuple(doc["scale"])
    model.global_mean = doc["global_mean"]
    model.users, model.items = doc["users"], doc["items"]
    model.n_train_users, model.n_train_items = doc["n_train"]
    model._build_index()
    model.x, model.y = blocks["x"], blocks["y"]
    if cls is HerecModel:
        model.kind = FusionKind[doc["fusion"]]
        model.d = doc["d"]
        model.user_paths, model.item_paths = doc["user_paths"], doc["item_paths"]
        model.provenance = doc.get("embeddings", {})
        model.gu, model.gi = blocks["gu"], blocks["gi"]
        model.EU, model.EI = blocks["EU"], blocks["EI"]
        model.theta_u = FusionParams(blocks["MU"], blocks["bU"], blocks["wU"], model.users)
        model.theta_i = FusionParams(blocks["MI"], blocks["bI"], blocks["wI"], model.items)
    return model
