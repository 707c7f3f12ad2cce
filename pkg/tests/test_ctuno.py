import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opbridge import layers as L
from opbridge.ctuno import (
    ARCH_PRESETS,
    ArchConfig,
    ConfigError,
    CtUnoParams,
    StageConfig,
    ctuno_backward,
    ctuno_forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    tiny_arch,
)
from opbridge.grid import resample_axis


def perturbed_tiny(seed, coord=True, scale=0.3):
    cfg = tiny_arch(coord)
    p = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    return CtUnoParams.from_flat(cfg, p.flat() + scale * rng.standard_normal(p.count))


def fd_relative_error(p, x, t, h=1e-5):
    vec = p.flat()

    def loss(v):
        y, _ = ctuno_forward(CtUnoParams.from_flat(p.cfg, v), x, t)
        return np.sum(y * y)

    y, tape = ctuno_forward(p, x, t)
    g, _ = ctuno_backward(tape, 2 * y)
    num = np.empty_like(vec)
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        num[i] = (loss(vec + e) - loss(vec - e)) / (2 * h)
    return np.max(np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8))


# -- time embedding ------------------------------------------------------------


def test_time_embed_at_zero():
    e = L.time_embed(0.0, 16)[0]
    assert np.all(e[0::2] == 0) and np.all(e[1::2] == 1)
    assert np.linalg.norm(e) == pytest.approx(np.sqrt(8))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.99), st.floats(0.01, 1.0))
def test_time_embed_separates_times(t, gap):
    t2 = min(t + gap, 1.0)
    if t2 - t < 0.01:
        return
    a, b = L.time_embed(np.array([t, t2]), 32)
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < 1 - 1e-6


def test_time_embed_rejects_odd_dim():
    with pytest.raises(ValueError):
        L.time_embed(0.1, 5)


# -- single Fourier layer ------------------------------------------------------


def _layer(cin, cout, nm, E=4, H=3):
    z = lambda *s: np.zeros(s)  # noqa: E731
    return {"W": z(cin, cout), "b": z(cout), "R": z(nm, cin, cout, 2),
            "psi": {"W1": z(E, H), "b1": z(H), "W2": z(H, cin), "b2": z(cin)},
            "phi": {"W1": z(E, H), "b1": z(H), "W2": z(H, 2 * nm), "b2": z(2 * nm)}}


def test_layer_pointwise_path_only():
    p = _layer(3, 3, 2)
    p["W"] = np.eye(3)
    x = np.random.default_rng(0).standard_normal((2, 8, 3))
    y, _ = L.fourier_layer_forward(p, x, L.time_embed(np.array([0.2, 0.6]), 4), (2,))
    np.testing.assert_allclose(y, L.gelu(x), atol=1e-15)


def test_layer_single_harmonic_spectral_action():
    p = _layer(1, 1, 3)
    r = 0.7
    p["R"][2, 0, 0, 0] = r
    x = np.cos(2 * np.pi * 2 * np.arange(8) / 8).reshape(1, 8, 1)
    y, _ = L.fourier_layer_forward(p, x, L.time_embed(0.3, 4), (3,))
    np.testing.assert_allclose(y, L.gelu(r * x), atol=1e-10)


def naive_spectral_layer(p, x, emb, modes):
    """Explicit loops over modes and channels; real DFT written out by hand."""
    B, m, cin = x.shape
    cout = p["W"].shape[1]
    psi = 1 + L.gelu(emb @ p["psi"]["W1"] + p["psi"]["b1"]) @ p["psi"]["W2"] + p["psi"]["b2"]
    ph = L.gelu(emb @ p["phi"]["W1"] + p["phi"]["b1"]) @ p["phi"]["W2"] + p["phi"]["b2"]
    out = np.zeros((B, m, cout))
    j = np.arange(m)
    for b in range(B):
        for o in range(cout):
            acc = np.zeros(m)
            for i in range(cin):
                acc += p["W"][i, o] * psi[b, i] * x[b, :, i]
            spec = np.zeros(m, dtype=complex)
            for k in range(modes):
                phi_k = (1 + ph[b, k]) + 1j * ph[b, modes + k]
                for i in range(cin):
                    Xk = np.sum(x[b, :, i] * np.exp(-2j * np.pi * k * j / m))
                    Rk = p["R"][k, i, o, 0] + 1j * p["R"][k, i, o, 1]
                    spec[k] += phi_k * Rk * Xk
            # inverse of a half spectrum: bins 1..m/2-1 count twice, real part only
            sig = np.zeros(m)
            for k in range(modes):
                w = 1.0 if k == 0 or 2 * k == m else 2.0
                sig += w * np.real(spec[k] * np.exp(2j * np.pi * k * j / m)) / m
            out[b, :, o] = L.gelu(acc + p["b"][o] + sig)
    return out


def test_layer_matches_naive_loops():
    rng = np.random.default_rng(7)
    p = _layer(2, 3, 3, E=4, H=5)
    for k in ("W", "b", "R"):
        p[k] = rng.standard_normal(p[k].shape)
    for h in ("psi", "phi"):
        for k in p[h]:
            p[h][k] = 0.3 * rng.standard_normal(p[h][k].shape)
    x = rng.standard_normal((2, 8, 2))
    emb = L.time_embed(np.array([0.1, 0.8]), 4)
    y, _ = L.fourier_layer_forward(p, x, emb, (3,))
    np.testing.assert_allclose(y, naive_spectral_layer(p, x, emb, 3), atol=1e-12)


def test_retained_modes_2d_layout():
    rows, cols = L.retained_mode_index((8, 8), (3, 2))
    pairs = list(zip(rows.tolist(), cols.tolist()))
    assert pairs[:2] == [(0, 0), (0, 1)]
    assert (7, 1) in pairs and (6, 0) in pairs and (5, 0) not in pairs
    assert len(pairs) == L.n_retained((3, 2)) == 10
    with pytest.raises(ValueError):
        L.retained_mode_index((8,), (5,))


def test_layer_output_bounded_at_init():
    cfg = ARCH_PRESETS["quadratic"]()
    p = init_params(cfg, 0)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 8, 16))
    x /= np.linalg.norm(x)
    y, _ = L.fourier_layer_forward(p.layer("down0"), x, L.time_embed(np.full(4, 0.5), cfg.time_dim), (4,))
    assert np.all(np.isfinite(y))
    assert np.linalg.norm(y) <= 10 * np.linalg.norm(x) + 10


# -- whole operator ------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    p = perturbed_tiny(seed)
    rng = np.random.default_rng(seed)
    assert fd_relative_error(p, rng.standard_normal((2, 8, 1)), np.array([0.3, 0.7])) < 1e-4


def test_input_gradient_matches_finite_differences():
    p = perturbed_tiny(4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 8, 1))
    y, tape = ctuno_forward(p, x, 0.4)
    _, gx = ctuno_backward(tape, 2 * y)
    h = 1e-6
    for j in range(8):
        e = np.zeros_like(x)
        e[0, j, 0] = h
        up = np.sum(ctuno_forward(p, x + e, 0.4)[0] ** 2)
        dn = np.sum(ctuno_forward(p, x - e, 0.4)[0] ** 2)
        assert gx[0, j, 0] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-9)


def test_zero_upstream_gives_zero_gradient():
    p = perturbed_tiny(0)
    y, tape = ctuno_forward(p, np.ones((2, 8, 1)), 0.5)
    g, gx = ctuno_backward(tape, np.zeros_like(y))
    assert not np.any(g) and not np.any(gx)


def test_batch_gradient_is_sum_of_singles():
    p = perturbed_tiny(1)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 1))
    t = np.array([0.2, 0.9])
    y, tape = ctuno_forward(p, x, t)
    gb, _ = ctuno_backward(tape, y / 2)
    singles = []
    for b in range(2):
        yb, tb = ctuno_forward(p, x[b:b + 1], t[b:b + 1])
        singles.append(ctuno_backward(tb, yb)[0])
    np.testing.assert_allclose(gb, (singles[0] + singles[1]) / 2, atol=1e-12)
    # and the batch order does not matter
    yr, tr = ctuno_forward(p, x[::-1], t[::-1])
    np.testing.assert_allclose(ctuno_backward(tr, yr / 2)[0], gb, atol=1e-12)


def test_tape_param_mismatch():
    p = perturbed_tiny(0)
    q = perturbed_tiny(1)
    y, tape = ctuno_forward(p, np.ones((1, 8, 1)), 0.5)
    with pytest.raises(ConfigError):
        ctuno_backward(tape, y, params=q)
    with pytest.raises(ConfigError):
        ctuno_backward(tape, np.ones((2, 8, 1)))


def test_flat_roundtrip_is_bitwise():
    p = init_params(ARCH_PRESETS["quadratic"](), 3)
    q = CtUnoParams.from_flat(p.cfg, p.flat())
    assert all(np.array_equal(a, b) for a, b in zip(p.tensors.values(), q.tensors.values()))
    assert np.array_equal(p.flat(), q.flat())
    with pytest.raises(ConfigError):
        CtUnoParams.from_flat(p.cfg, p.flat()[:-1])


def test_parameter_count_is_stable():
    cfg = ARCH_PRESETS["quadratic"]()
    assert init_params(cfg, 0).count == init_params(cfg, 5).count == 49981
    assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == 49981


def test_init_is_deterministic_and_near_identity():
    cfg = ARCH_PRESETS["quadratic"]()
    a, b = init_params(cfg, 11), init_params(cfg, 11)
    assert np.array_equal(a.flat(), b.flat())
    emb = L.time_embed(0.5, cfg.time_dim)
    for name in ("down0", "down2", "up1"):
        lay = a.layer(name)
        psi = 1 + L.head_forward(lay["psi"], emb)[0]
        phi_out = L.head_forward(lay["phi"], emb)[0]
        assert np.max(np.abs(psi - 1)) < 0.1
        assert np.max(np.abs(phi_out)) < 0.1
    lim = np.sqrt(6 / (16 + 16))
    assert np.max(np.abs(a.tensors["down0.W"])) <= lim


@pytest.mark.parametrize("name,dims", [("quadratic", (8,)), ("ellipse", (16,)), ("butterfly", (32,)),
                                       ("sphere", (16, 16))])
def test_presets_forward_at_init(name, dims):
    cfg = ARCH_PRESETS[name]()
    p = init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal((2,) + dims + (cfg.in_channels,))
    x /= np.linalg.norm(x)
    y, _ = ctuno_forward(p, x, np.array([0.1, 0.9]))
    assert y.shape == x.shape[:-1] + (cfg.out_channels,)
    ratio = np.linalg.norm(y) / np.linalg.norm(x)
    assert np.all(np.isfinite(y)) and 0 < ratio < 100


def test_zero_input_zero_output():
    cfg = tiny_arch(coord_features=False)
    p = init_params(cfg, 0)
    y, _ = ctuno_forward(p, np.zeros((1, 8, 1)), 0.3)
    assert not np.any(y)


def test_output_grid_follows_input_grid():
    p = init_params(ARCH_PRESETS["quadratic"](), 0)
    for m in (8, 16, 24, 64):
        y, _ = ctuno_forward(p, np.ones((1, m, 1)), 0.5)
        assert y.shape == (1, m, 1)


def test_discretization_consistency_untrained():
    p = init_params(ARCH_PRESETS["ellipse"](), 0)
    m = 16
    s = np.arange(m) / m
    x16 = np.stack([1.25 * np.cos(2 * np.pi * s), 0.85 * np.sin(2 * np.pi * s)], -1)[None]
    x32 = resample_axis(x16, 1, 32)
    y16, _ = ctuno_forward(p, x16, 0.5)
    y32, _ = ctuno_forward(p, x32, 0.5)
    shared = y32[:, ::2]
    assert np.linalg.norm(shared - y16) / np.linalg.norm(y16) < 0.05


def test_grid_too_small_is_config_error():
    p = init_params(ARCH_PRESETS["quadratic"](), 0)
    with pytest.raises(ConfigError):
        ctuno_forward(p, np.ones((1, 4, 1)), 0.5)
    with pytest.raises(ConfigError):
        ctuno_forward(p, np.ones((1, 10, 1)), 0.5)
    with pytest.raises(ConfigError):
        ctuno_forward(p, np.ones((1, 8, 2)), 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        ArchConfig(1, 1, 4, (StageConfig(4, (2,), 1),), ())
    with pytest.raises(ConfigError):
        ArchConfig(1, 1, 4, (StageConfig(4, (2,), 1),), (StageConfig(4, (2,), 2, 4),))
    with pytest.raises(ConfigError):
        ArchConfig(1, 1, 4, (StageConfig(4, (2,), 1),), (StageConfig(4, (2,), 1),))
    cfg = tiny_arch()
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(ARCH_PRESETS["ellipse"](), 2)
    save_checkpoint(tmp_path / "c.brgp", p, {"note": "hello"})
    q, header = load_checkpoint(tmp_path / "c.brgp")
    assert np.array_equal(p.flat(), q.flat())
    assert q.cfg == p.cfg
    assert header["param_count"] == p.count and header["metadata"]["note"] == "hello"
    raw = (tmp_path / "c.brgp").read_bytes()
    assert raw[:4] == b"BRGP"
    (tmp_path / "bad.brgp").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.brgp")
