import numpy as np
import pytest

from diffmorph import nets
from diffmorph import tensor as T
from diffmorph.tensor import Tensor, grad_check


def _inputs(rng, batch=1, n=32, dtype=np.float32):
    m = Tensor(rng.standard_normal((batch, 1, n, n)).astype(dtype))
    f = Tensor(rng.standard_normal((batch, 1, n, n)).astype(dtype))
    x = Tensor(rng.standard_normal((batch, 1, n, n)).astype(dtype))
    return m, f, x


def _small_nets(dtype=np.float64):
    G = nets.ScoreNet(ladder=(8, 8, 8, 8), emb_dim=16, seed=3,
                      dtype=dtype)
    M = nets.DeformNet(ladder=(8, 8, 8, 8), seed=4, dtype=dtype)
    return G, M


# ------------------------------------------------------------- embeddings

def test_time_embedding_deterministic_and_distinct():
    ts = list(range(0, 2001, 7))
    seen = set()
    for t in ts:
        e = nets.sinusoidal_embedding(t, 16)
        again = nets.sinusoidal_embedding(t, 16)
        assert np.array_equal(e, again)
        seen.add(e.tobytes())
    assert len(seen) == len(ts)


# -------------------------------------------------------------- score net

def test_score_shape_contract():
    rng = np.random.default_rng(0)
    G = nets.ScoreNet(seed=1)
    m, f, x = _inputs(rng)
    out = nets.score_forward(G, (m, f), x, 100)
    assert tuple(out.shape) == (1, 1, 32, 32)
    assert out.dtype == np.float32


def test_score_deterministic():
    rng = np.random.default_rng(1)
    G = nets.ScoreNet(seed=1)
    m, f, x = _inputs(rng)
    a = G((m, f), x, 7)
    b = G((m, f), x, 7)
    assert a.data.tobytes() == b.data.tobytes()


def test_score_construction_seeded():
    a = nets.ScoreNet(seed=5)
    b = nets.ScoreNet(seed=5)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_score_input_validation():
    rng = np.random.default_rng(2)
    G = nets.ScoreNet(seed=1)
    m, f, x = _inputs(rng)
    bad = Tensor(rng.standard_normal((1, 1, 32, 16)).astype(np.float32))
    with pytest.raises(ValueError):
        G((m, f), bad, 5)
    with pytest.raises(ValueError):
        G((m, bad), x, 5)
    with pytest.raises(ValueError):
        G((m, f), x, -1)
    two = Tensor(rng.standard_normal((1, 2, 32, 32)).astype(np.float32))
    with pytest.raises(ValueError):
        G((two, two), two, 5)


def test_score_batch_decomposition():
    rng = np.random.default_rng(3)
    G = nets.ScoreNet(seed=1)
    m, f, x = _inputs(rng, batch=3)
    full = G((m, f), x, 42).data
    for i in range(3):
        mi = Tensor(m.data[i:i + 1])
        fi = Tensor(f.data[i:i + 1])
        xi = Tensor(x.data[i:i + 1])
        one = G((mi, fi), xi, 42).data
        assert np.allclose(one, full[i:i + 1], atol=1e-6)


def test_score_full_graph_param_gradient():
    # ten weight entries of the stem conv, checked through the whole net;
    # the head starts at zero, so give it weight or the body path is dead
    rng = np.random.default_rng(4)
    G, _ = _small_nets()
    G.params["head.w"].data[...] = 0.1 * rng.standard_normal(
        G.params["head.w"].shape)
    m, f, x = _inputs(rng, n=16, dtype=np.float64)
    base = G.params["stem.w"].data.reshape(-1).copy()
    rest = Tensor(base[10:].copy())
    shape = G.params["stem.w"].shape

    def run(head):
        G.params["stem.w"] = T.concat([head, rest], axis=0).reshape(*shape)
        return G((m, f), x, 9).mean()

    err = grad_check(run, Tensor(base[:10].copy()))
    assert err < 1e-3


def test_score_head_bias_gradient():
    rng = np.random.default_rng(5)
    G, _ = _small_nets()
    m, f, x = _inputs(rng, n=16, dtype=np.float64)

    def run(b):
        G.params["head.b"] = b
        return (G((m, f), x, 3) * G((m, f), x, 3)).mean()

    err = grad_check(run, Tensor(G.params["head.b"].data.copy()))
    assert err < 1e-3


# ------------------------------------------------------------- deform net

def test_deform_shape_and_zero_init():
    rng = np.random.default_rng(6)
    M = nets.DeformNet(seed=2)
    m, _, x = _inputs(rng)
    field = nets.deform_forward(M, m, x)
    assert tuple(field.shape) == (1, 2, 32, 32)
    assert not field.data.any()


def test_deform_shape_validation():
    rng = np.random.default_rng(7)
    M = nets.DeformNet(seed=2)
    m, _, _ = _inputs(rng)
    with pytest.raises(ValueError):
        M(m, Tensor(rng.standard_normal((1, 1, 16, 32)).astype(np.float32)))


def test_deform_full_graph_param_gradient():
    rng = np.random.default_rng(8)
    _, M = _small_nets()
    m, _, e = _inputs(rng, n=16, dtype=np.float64)
    base = M.params["dec0.w"].data.reshape(-1).copy()
    rest = Tensor(base[10:].copy())
    shape = M.params["dec0.w"].shape

    def run(head):
        M.params["dec0.w"] = T.concat([head, rest], axis=0).reshape(*shape)
        return (M(m, e) * M(m, e)).mean()

    err = grad_check(run, Tensor(base[:10].copy()))
    assert err < 1e-3


# ------------------------------------------------------- latent / register

def test_latent_at_eta_contracts():
    rng = np.random.default_rng(9)
    G = nets.ScoreNet(seed=1)
    m, f, _ = _inputs(rng)
    zero = nets.latent_at_eta(G, (m, f), 0.0)
    assert not zero.data.any()
    half = nets.latent_at_eta(G, (m, f), 0.5)
    full = nets.latent_at_eta(G, (m, f), 1.0)
    assert np.array_equal(half.data * 2.0, full.data)
    for eta in (-0.1, 1.0001):
        with pytest.raises(ValueError):
            nets.latent_at_eta(G, (m, f), eta)


def test_latent_eta_one_matches_register():
    rng = np.random.default_rng(10)
    G = nets.ScoreNet(seed=1)
    M = nets.DeformNet(seed=2)
    m, f, _ = _inputs(rng)
    field, _ = nets.register(G, M, m, f)
    with T.no_grad():
        latent = nets.latent_at_eta(G, (m, f), 1.0)
        field2 = M(m, latent)
    assert field.data.tobytes() == field2.data.tobytes()


def test_register_deterministic_and_identity_at_init():
    rng = np.random.default_rng(11)
    G = nets.ScoreNet(seed=1)
    M = nets.DeformNet(seed=2)
    m, f, _ = _inputs(rng)
    f1, w1 = nets.register(G, M, m, f)
    f2, w2 = nets.register(G, M, m, f)
    assert f1.data.tobytes() == f2.data.tobytes()
    assert w1.data.tobytes() == w2.data.tobytes()
    # zero-init deform head: identity warp
    assert np.array_equal(w1.data, m.data)


def test_register_batch_decomposition():
    rng = np.random.default_rng(12)
    G = nets.ScoreNet(seed=6)
    M = nets.DeformNet(seed=7)
    # break the zero field so the warp actually does something
    M.params["out.w"].data[...] = 0.01 * rng.standard_normal(
        M.params["out.w"].shape).astype(np.float32)
    m, f, _ = _inputs(rng, batch=3)
    field, warped = nets.register(G, M, m, f)
    for i in range(3):
        fi, wi = nets.register(G, M, Tensor(m.data[i:i + 1]),
                               Tensor(f.data[i:i + 1]))
        assert np.allclose(fi.data, field.data[i:i + 1], atol=1e-6)
        assert np.allclose(wi.data, warped.data[i:i + 1], atol=1e-6)


def test_cast_roundtrip():
    G = nets.ScoreNet(ladder=(8, 8, 8, 8), emb_dim=16, seed=3)
    G64 = G.cast(np.float64)
    assert G64.params["stem.w"].dtype == np.float64
    assert G.params["stem.w"].dtype == np.float32
    rng = np.random.default_rng(13)
    m, f, x = _inputs(rng, n=16, dtype=np.float64)
    out = G64((m, f), x, 5)
    assert out.dtype == np.float64
