import numpy as np
import pytest

from herec.embedder import DivergenceError, EmbeddingMatrix, EmbeddingSet
from herec.fusion import FusionKind
from herec.hin import RatingDataset, RatingRecord
from herec.recommender import HerecModel, HyperParams, MFModel, load_model, predict_base, save_model

from conftest import random_ratings

KINDS = list(FusionKind)


def emb(target, ids, P, d, rng):
    return EmbeddingSet(target, {f"{target}{l}": EmbeddingMatrix(list(ids), rng.standard_normal((len(ids), d)))
                                 for l in range(P)})


def micro(kind, rng, hp=None, P=2, d=4, D=3):
    ds = RatingDataset([RatingRecord("u0", "i0", 4.0), RatingRecord("u1", "i1", 2.0),
                        RatingRecord("u0", "i1", 3.0), RatingRecord("u1", "i0", 5.0)], (1, 5))
    hp = hp or HyperParams(D=D, lam=0.03, lam_theta=0.02, lam_gamma=0.05, eta=1e-3, alpha=0.7, beta=1.3)
    m = HerecModel(ds, emb("U", ["u0", "u1"], P, d, rng), emb("I", ["i0", "i1"], P, d, rng), kind, hp)
    m.initialize()
    for b in m.parameter_blocks().values():
        b[...] = rng.standard_normal(b.shape)
    return m, ds


# --------------------------------------------------------------------------- independent oracle


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def fused_by_hand(kind, E, M, b, w):
    P = len(E)
    terms = [M[l] @ E[l] + b[l] for l in range(P)]
    if kind == FusionKind.SIMPLE_LINEAR:
        return sum(terms) / P
    if kind == FusionKind.PERSONALIZED_LINEAR:
        return sum(w[l] * terms[l] for l in range(P))
    return sig(sum(w[l] * sig(terms[l]) for l in range(P)))


def objective_by_hand(m, ds):
    h = m.hyper
    total = 0.0
    for r in ds.records:
        u, i = m.user_index[r.user], m.item_index[r.item]
        eu = fused_by_hand(m.kind, m.EU[u], m.theta_u.M, m.theta_u.b, m.theta_u.w[u])
        ei = fused_by_hand(m.kind, m.EI[i], m.theta_i.M, m.theta_i.b, m.theta_i.w[i])
        pred = m.x[u] @ m.y[i] + h.alpha * eu @ m.gi[i] + h.beta * m.gu[u] @ ei
        total += (r.rating - pred) ** 2
    total += h.lam * ((m.x ** 2).sum() + (m.y ** 2).sum())
    total += h.lam_gamma * ((m.gu ** 2).sum() + (m.gi ** 2).sum())
    theta = sum((t.M ** 2).sum() + (t.b ** 2).sum() for t in (m.theta_u, m.theta_i))
    if m.kind.personalized:
        theta += (m.theta_u.w ** 2).sum() + (m.theta_i.w ** 2).sum()
    return total + h.lam_theta * theta


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.short)
def test_objective_matches_hand_computation(kind):
    m, ds = micro(kind, np.random.default_rng(5))
    assert m.objective(ds) == pytest.approx(objective_by_hand(m, ds), rel=1e-12)


def test_objective_trivial_cases():
    ds = RatingDataset([RatingRecord("a", "x", 2.0)], (1, 5))
    m = MFModel(ds, HyperParams(D=1, lam=0))
    m.x[:] = 1.0
    m.y[:] = 2.0
    assert m.objective(ds) == 0.0
    h = HerecModel(ds, None, None, "pnl", HyperParams(D=2))
    assert h.objective(RatingDataset([], (1, 5))) == 0.0


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.short)
def test_end_to_end_gradient(kind):
    m, ds = micro(kind, np.random.default_rng(11 + int(kind)))
    grads = m.objective_gradients(ds)
    h = 1e-6
    for name, arr in m.parameter_blocks().items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = m.objective(ds)
            arr[idx] = old - h
            down = m.objective(ds)
            arr[idx] = old
            num = (up - down) / (2 * h)
            an = grads[name][idx]
            assert abs(num - an) <= 1e-4 * max(abs(num), abs(an), 1e-2), (name, idx, num, an)


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.short)
def test_sgd_step_is_scaled_triple_gradient(kind):
    """One step moves every touched block by -eta/2 times the single-triple objective gradient."""
    rng = np.random.default_rng(21 + int(kind))
    m, _ = micro(kind, rng)
    u, i, r = "u0", "i1", 3.0
    one = RatingDataset([RatingRecord(u, i, r)], (1, 5))
    ku, ki = m.user_index[u], m.item_index[i]
    # per-triple objective: regularizers restricted to the touched entity rows
    g = m.objective_gradients(one)
    lam_rows = {"x": ku, "gu": ku, "wU": ku, "y": ki, "gi": ki, "wI": ki}
    for name, row in lam_rows.items():
        mask = np.zeros(g[name].shape[0], dtype=bool)
        mask[row] = True
        g[name][~mask] = 0.0
    before = {k: v.copy() for k, v in m.parameter_blocks().items()}
    m.sgd_step(u, i, r)
    for name, arr in m.parameter_blocks().items():
        assert np.allclose(arr - before[name], -m.hyper.eta / 2 * g[name], rtol=0, atol=1e-11), name


def test_zero_error_without_regularization_is_a_fixed_point():
    rng = np.random.default_rng(3)
    m, _ = micro("pnl", rng, HyperParams(D=3, lam=0, lam_theta=0, lam_gamma=0, eta=0.1))
    r = m.predict("u0", "i0", clip=False)
    before = {k: v.copy() for k, v in m.parameter_blocks().items()}
    m.sgd_step("u0", "i0", r)
    for k, v in m.parameter_blocks().items():
        assert np.array_equal(v, before[k])


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.short)
def test_single_step_descends(kind):
    m, _ = micro(kind, np.random.default_rng(8), HyperParams(D=3, lam=0, lam_theta=0, lam_gamma=0, eta=1e-4))
    err0 = (4.0 - m.predict("u0", "i0", clip=False)) ** 2
    m.sgd_step("u0", "i0", 4.0)
    assert (4.0 - m.predict("u0", "i0", clip=False)) ** 2 < err0


def test_hyperparam_validation():
    for bad in ({"D": 0}, {"eta": 0.0}, {"lam": -1}, {"epochs": 0}):
        with pytest.raises(ValueError):
            HyperParams(**bad)
    assert HyperParams().replace(alpha=2.0).alpha == 2.0
    assert HyperParams.from_dict({"D": 4, "bogus": 1}).D == 4


def test_predict_base_and_degenerate_weights():
    ds = RatingDataset([RatingRecord("u", "i", 3.0)], (1, 5))
    m = MFModel(ds, HyperParams(D=2))
    assert predict_base(m, "u", "i") == 0.0
    m.x[0] = [1, 2]
    m.y[0] = [3, -1]
    assert predict_base(m, "u", "i") == 1.0
    rng = np.random.default_rng(2)
    h, _ = micro("pnl", rng, HyperParams(D=3, alpha=0.0, beta=0.0))
    assert h.predict("u1", "i0", clip=False) == predict_base(h, "u1", "i0")
    z, _ = micro("pl", rng)
    for b in z.parameter_blocks().values():
        b[...] = 0.0
    assert z.predict("u0", "i0", clip=False) == 0.0


def test_unknown_entity_fallbacks():
    rng = np.random.default_rng(4)
    m, ds = micro("pnl", rng)
    assert m.predict("ghost", "phantom") == pytest.approx(ds.mean())
    # one side unknown: the missing side's vectors are zero
    ku = m.user_index["u0"]
    eu = m.fused_user("u0")
    expect = m.hyper.alpha * eu @ np.zeros(3) + 0.0
    assert m.predict("u0", "phantom", clip=False) == pytest.approx(expect)
    assert m.predict("ghost", "i0", clip=False) == pytest.approx(0.0)
    assert m.x[ku].shape == (3,)
    # clipping at serving time only
    m.x[ku] = 100.0
    m.y[m.item_index["i0"]] = 100.0
    assert m.predict("u0", "i0") == 5.0
    assert m.predict("u0", "i0", clip=False) != 5.0


def test_embedding_only_entities():
    rng = np.random.default_rng(6)
    ds = RatingDataset([RatingRecord("u0", "i0", 4.0)], (1, 5))
    ue = emb("U", ["u0", "u9"], 2, 3, rng)
    m = HerecModel(ds, ue, emb("I", ["i0"], 2, 3, rng), "pnl", HyperParams(D=2, epochs=3))
    assert m.users == ["u0", "u9"]
    m.train(ds)
    k = m.user_index["u9"]
    assert np.all(m.x[k] == 0) and np.all(m.gu[k] == 0)
    assert np.all(m.theta_u.w[k] == 0.5)
    assert np.isfinite(m.predict("u9", "i0"))


def test_bit_identical_ablation_with_mf():
    rng = np.random.default_rng(0)
    ds = random_ratings(rng, 60, 40, 500)
    users, items = ds.users(), ds.items()
    hp = HyperParams(D=5, alpha=0.0, beta=0.0, lam_theta=0.0, lam_gamma=0.0, epochs=20, patience=0, seed=7)
    mf = MFModel(ds, hp)
    he = HerecModel(ds, emb("U", users, 2, 4, rng), emb("I", items, 1, 4, rng), "pnl", hp)
    traj_mf, traj_he = [], []
    mf.train(ds, callback=lambda e, m: traj_mf.append((m.x.copy(), m.y.copy())))
    he.train(ds, callback=lambda e, m: traj_he.append((m.x.copy(), m.y.copy())))
    assert len(traj_mf) == len(traj_he) == 20
    for (x1, y1), (x2, y2) in zip(traj_mf, traj_he):
        assert np.array_equal(x1, x2) and np.array_equal(y1, y2)


def test_regularization_monotonicity():
    rng = np.random.default_rng(1)
    ds = random_ratings(rng, 30, 20, 200)
    ue, ie = emb("U", ds.users(), 2, 4, rng), emb("I", ds.items(), 2, 4, rng)
    base = HyperParams(D=4, epochs=30, patience=0)
    # each knob against the block it penalizes
    for knob, keys in (("lam", ("norm_x", "norm_y")), ("lam_gamma", ("norm_gamma",)),
                       ("lam_theta", ("norm_theta",))):
        rows = [HerecModel(ds, ue, ie, "pl", base.replace(**{knob: v})).train(ds).rows[-1] for v in (0.01, 0.1)]
        for key in keys:
            assert rows[1][key] <= rows[0][key], (knob, key)


def test_training_reports_and_early_stop():
    rng = np.random.default_rng(2)
    ds = random_ratings(rng, 30, 20, 200)
    m = HerecModel(ds, emb("U", ds.users(), 1, 3, rng), None, "sl", HyperParams(D=3, epochs=50, tol=1.0))
    rep = m.train(ds)
    assert rep.stopped_early and len(rep.rows) == 4  # epoch 1 plus three stalled epochs
    assert all(np.isfinite(rep.objectives))
    with pytest.raises(ValueError):
        m.train(RatingDataset([], (1, 5)))


def test_divergence_detected():
    rng = np.random.default_rng(3)
    ds = random_ratings(rng, 20, 20, 100)
    m = MFModel(ds, HyperParams(D=3, eta=1e3, epochs=5))
    with pytest.raises(DivergenceError):
        m.train(ds)
    h = HerecModel(ds, emb("U", ds.users(), 1, 3, rng), None, "pnl", HyperParams(D=3, eta=1e3, epochs=5))
    with pytest.raises(DivergenceError):
        h.train(ds)


def test_objective_falls_within_twenty_epochs():
    rng = np.random.default_rng(9)
    ds = random_ratings(rng, 50, 30, 400)
    ue, ie = emb("U", ds.users(), 2, 4, rng), emb("I", ds.items(), 2, 4, rng)
    for kind in KINDS:
        objs = HerecModel(ds, ue, ie, kind, HyperParams(D=4, epochs=20, patience=0)).train(ds).objectives
        assert objs[19] < objs[0]


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.short)
def test_model_round_trip(tmp_path, kind):
    rng = np.random.default_rng(12)
    ds = random_ratings(rng, 20, 15, 80)
    m = HerecModel(ds, emb("U", ds.users() + ["extra"], 2, 3, rng), emb("I", ds.items(), 1, 3, rng), kind,
                   HyperParams(D=3, epochs=5))
    m.train(ds)
    m.provenance = {"U0": {"sha256": "abc"}}
    p = tmp_path / "m.json"
    save_model(m, p)
    back = load_model(p)
    pairs = [(u, i) for u in ds.users()[:5] + ["extra", "ghost"] for i in ds.items()[:5] + ["nope"]]
    assert np.max(np.abs(back.predict_many(pairs) - m.predict_many(pairs))) <= 1e-9
    assert back.kind == m.kind and back.provenance == m.provenance


def test_mf_round_trip(tmp_path):
    ds = random_ratings(np.random.default_rng(13), 20, 15, 80)
    m = MFModel(ds, HyperParams(D=3, epochs=5))
    m.train(ds)
    save_model(m, tmp_path / "mf.json")
    back = load_model(tmp_path / "mf.json")
    pairs = [(r.user, r.item) for r in ds.records]
    assert np.array_equal(back.predict_many(pairs), m.predict_many(pairs))


def test_load_model_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_model(p)
