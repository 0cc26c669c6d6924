import math

import numpy as np
import pytest
import torch
from torch import nn

import oracles
from himnet.data import NormStats
from himnet.errors import ConfigError, ShapeError
from himnet.metaparams import adaptive_graph_dynamic, adaptive_graph_static
from himnet.model import (ABLATIONS, GcruLayout, GcruParams, HimNet, HimNetConfig, count_parameters, gcru_rollout,
                          gcru_step, graph_conv, metrla_config, parameter_registry)

f64 = dict(dtype=torch.float64)


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def tiny_config(**kw):
    base = dict(num_nodes=3, in_steps=2, out_steps=2, hidden_dim=3, order=1, d_tod=2, d_dow=2, d_s=2, d_st=2,
                steps_per_day=4)
    base.update(kw)
    return HimNetConfig(**base)


def tiny_model(seed=0, stats=NormStats(0.0, 1.0), **kw):
    return HimNet(tiny_config(**kw), stats=stats, seed=seed, dtype=torch.float64)


def split_flat(flat, C, h, K1, with_bias=True):
    """Plain-list view of one flat GCRU parameter vector: {gate: (W[K+1][C][h], b[h])}."""
    flat = list(flat)
    ks = K1 * C * h
    out = {}
    for g, gate in enumerate("ruc"):
        chunk = flat[g * ks:(g + 1) * ks]
        W = [[[chunk[(k * C + c) * h + o] for o in range(h)] for c in range(C)] for k in range(K1)]
        b = flat[3 * ks + g * h:3 * ks + (g + 1) * h] if with_bias else None
        out[gate] = (W, b)
    return out


def zero_params(C, h, K1=2):
    z = torch.zeros(K1, C, h, **f64)
    b = torch.zeros(h, **f64)
    return GcruParams(z, z, z, b, b, b)


# -- configuration -----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError, match="hidden_dim"):
        tiny_config(hidden_dim=0)
    with pytest.raises(ConfigError, match="unknown ablation"):
        tiny_config(ablation={"no_XYZ"})
    cfg = tiny_config(ablation={"no_TMP"})
    assert HimNetConfig.from_dict(cfg.to_dict()) == cfg


# -- graph_conv --------------------------------------------------------------


def test_graph_conv_order_zero():
    U, W, b = rand(2, 3, 4, seed=1), rand(1, 4, 5, seed=2), rand(5, seed=3)
    torch.testing.assert_close(graph_conv(U, rand(3, 3), W, b), U @ W[0] + b, rtol=0, atol=1e-12)


def test_graph_conv_identity_graph():
    U, W, b = rand(1, 3, 2, seed=1), rand(2, 2, 4, seed=2), rand(4, seed=3)
    torch.testing.assert_close(graph_conv(U, torch.eye(3, **f64), W, b), U @ W[0] + U @ W[1] + b)


def test_graph_conv_loop_oracle_shared():
    U, W, b = rand(1, 3, 2, seed=4), rand(2, 2, 3, seed=5), rand(3, seed=6)
    A = torch.softmax(rand(3, 3, seed=7), -1)
    expected = oracles.graph_conv_single(U[0].tolist(), A.tolist(), W.tolist(), b.tolist())
    np.testing.assert_allclose(graph_conv(U, A, W, b)[0].numpy(), expected, rtol=1e-10)


@pytest.mark.parametrize("lead", [(1, 1), (2, 1), (1, 3), (2, 3)])
def test_graph_conv_context_kernels(lead):
    B, N, C, h, K1 = 2, 3, 2, 2, 3
    U = rand(B, N, C, seed=1)
    A = torch.softmax(rand(B, N, N, seed=2), -1)
    W = rand(*lead, K1, C, h, seed=3)
    b = rand(*lead, h, seed=4)
    Z = graph_conv(U, A, W, b)
    for i in range(B):
        wi = W[i if lead[0] > 1 else 0]
        bi = b[i if lead[0] > 1 else 0]
        expected = oracles.graph_conv_single(U[i].tolist(), A[i].tolist(),
                                             lambda n: wi[n if lead[1] > 1 else 0].tolist(),
                                             lambda n: bi[n if lead[1] > 1 else 0].tolist())
        np.testing.assert_allclose(Z[i].numpy(), expected, rtol=1e-10)


def test_graph_conv_shape_errors():
    U = rand(1, 3, 2)
    with pytest.raises(ShapeError, match="adjacency"):
        graph_conv(U, rand(4, 4), rand(2, 2, 3), rand(3))
    with pytest.raises(ShapeError, match="input channels"):
        graph_conv(U, rand(3, 3), rand(2, 5, 3), rand(3))
    with pytest.raises(ShapeError, match="broadcast"):
        graph_conv(U, rand(3, 3), rand(1, 2, 2, 2, 3), rand(3))


# -- gcru_step ---------------------------------------------------------------


def test_gcru_zero_params_halves_state():
    H = rand(2, 3, 4, seed=1)
    out = gcru_step(rand(2, 3, 1, seed=2), H, zero_params(5, 4), torch.softmax(rand(3, 3), -1))
    torch.testing.assert_close(out, 0.5 * H, rtol=0, atol=0)


def test_gcru_zero_state_zero_params():
    out = gcru_step(rand(1, 3, 1), torch.zeros(1, 3, 4, **f64), zero_params(5, 4), torch.eye(3, **f64))
    assert torch.equal(out, torch.zeros(1, 3, 4, **f64))


@pytest.mark.parametrize("seed", range(5))
def test_gcru_step_scalar_oracle(seed):
    N, h, K1 = 2, 2, 2
    x, H = rand(1, N, 1, seed=seed), rand(1, N, h, seed=seed + 10)
    A = torch.softmax(rand(N, N, seed=seed + 20), -1)
    Ws = [rand(K1, 1 + h, h, seed=seed + 30 + g) for g in range(3)]
    bs = [rand(h, seed=seed + 40 + g) for g in range(3)]
    out = gcru_step(x, H, GcruParams(*Ws, *bs), A)
    params = {g: (Ws[i].tolist(), bs[i].tolist()) for i, g in enumerate("ruc")}
    expected = oracles.gcru_step_single(x[0].tolist(), H[0].tolist(), A.tolist(), params)
    np.testing.assert_allclose(out[0].numpy(), expected, rtol=1e-10)


def test_layout_round_trip():
    layout = GcruLayout(1, 3, 1)
    assert layout.size == 3 * 2 * 4 * 3 + 9
    flat = torch.arange(layout.size, **f64)
    p = layout.unflatten(flat)
    ref = split_flat(flat.tolist(), 4, 3, 2)
    for i, g in enumerate("ruc"):
        assert p[i].tolist() == ref[g][0]
        assert p[3 + i].tolist() == ref[g][1]
    with pytest.raises(ShapeError):
        layout.unflatten(flat[:-1])
    nb = GcruLayout(1, 3, 1, with_bias=False)
    with pytest.raises(ShapeError, match="shared bias"):
        nb.unflatten(torch.zeros(nb.size, **f64))


# -- encode / decode ----------------------------------------------------------


def zero_model(**kw):
    model = tiny_model(**kw)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not name.startswith("bank"):
                p.zero_()
    return model


def test_encode_zero_fixed_point():
    model = zero_model()
    x = torch.zeros(2, 5, 3, **f64)
    E_t = model.temporal_query(torch.tensor([0, 1]), torch.tensor([0, 3]))
    assert torch.equal(model.encode(x, E_t, model.spatial_query()), torch.zeros(2, 3, 3, **f64))


def test_encode_sum_is_commutative():
    model = tiny_model(seed=3)
    x = rand(2, 2, 3, seed=1)
    E_t = model.temporal_query(torch.tensor([1, 2]), torch.tensor([4, 5]))
    E_s = model.spatial_query()
    A = adaptive_graph_static(E_s)
    H_t = gcru_rollout(x, model.temporal_params(E_t), A, 3)
    H_s = gcru_rollout(x, model.spatial_params(E_s), A, 3)
    torch.testing.assert_close(model.encode(x, E_t, E_s), H_s + H_t, rtol=0, atol=0)


def _model_gates(model, pool, query, C):
    flat = oracles.weighted_sum(pool.P.tolist(), query)
    return split_flat(flat, C, model.config.hidden_dim, model.config.order + 1)


def test_encode_single_step_oracle():
    cfg = tiny_config(num_nodes=1, in_steps=1)
    model = HimNet(cfg, seed=4, dtype=torch.float64)
    x = rand(1, 1, 1, seed=5)
    E_t = model.temporal_query(torch.tensor([2]), torch.tensor([1]))
    E_s = model.spatial_query()
    H = model.encode(x, E_t, E_s)
    A = oracles.adaptive_graph(E_s.tolist())
    zero = [[0.0] * 3]
    gt = _model_gates(model, model.pool_t, E_t[0].tolist(), 4)
    gs = _model_gates(model, model.pool_s, E_s[0].tolist(), 4)
    Ht = oracles.gcru_step_single(x[0].tolist(), zero, A, gt)
    Hs = oracles.gcru_step_single(x[0].tolist(), zero, A, gs)
    np.testing.assert_allclose(H[0].detach().numpy(), np.add(Ht, Hs), rtol=1e-10)


def test_decode_zero_everything_gives_head_bias():
    model = zero_model()
    with torch.no_grad():
        model.head_bias.fill_(0.37)
    out = model.decode(torch.zeros(2, 3, 3, **f64))
    torch.testing.assert_close(out, torch.full((2, 2, 3), 0.37, **f64))


def test_decode_one_step_is_step_plus_head():
    model = tiny_model(seed=5, out_steps=1)
    H = rand(2, 3, 3, seed=1)
    E_st = model.st_query(H)
    expected = model.output(gcru_step(torch.zeros(2, 3, 1, **f64), H, model.st_params(E_st),
                                      adaptive_graph_dynamic(E_st)))
    torch.testing.assert_close(model.decode(H), expected[:, None], rtol=0, atol=0)


def test_decode_two_step_oracle():
    model = tiny_model(seed=6)
    H = rand(1, 3, 3, seed=2)
    out = model.decode(H).detach()
    Hl = H[0].tolist()
    W_E, b_E = model.W_E.tolist(), model.b_E.tolist()
    E_st = oracles.affine([Hl], W_E, b_E)[0]
    A = oracles.adaptive_graph(E_st)
    node_params = [_model_gates(model, model.pool_st, E_st[n], 4) for n in range(3)]
    params = {g: (lambda n, g=g: node_params[n][g][0], lambda n, g=g: node_params[n][g][1]) for g in "ruc"}
    w, c = model.head_weight.tolist(), model.head_bias.item()
    step_in = [[0.0] for _ in range(3)]
    state = Hl
    for t in range(2):
        state = oracles.gcru_step_single(step_in, state, A, params)
        y = [sum(state[n][j] * w[j] for j in range(3)) + c for n in range(3)]
        np.testing.assert_allclose(out[0, t].numpy(), y, rtol=1e-10)
        step_in = [[v] for v in y]


# -- forward -----------------------------------------------------------------


def batch(B=2, T=2, N=3, seed=0):
    rng = np.random.default_rng(seed)
    return rand(B, T, N, seed=seed), rng.integers(0, 4, B), rng.integers(0, 7, B)


def test_forward_shape_and_determinism():
    model = tiny_model(seed=1, out_steps=4)
    for B in (1, 2, 5):
        x, tod, dow = batch(B)
        out = model(x, tod, dow)
        assert out.shape == (B, 4, 3)
        assert torch.equal(out, model(x, tod, dow))


def test_forward_denormalizes():
    a = tiny_model(seed=2)
    b = tiny_model(seed=2, stats=NormStats(10.0, 3.0))
    x, tod, dow = batch()
    torch.testing.assert_close(b(x, tod, dow), a(x, tod, dow) * 3.0 + 10.0)


def test_forward_rejects_wrong_node_count():
    with pytest.raises(ShapeError, match="expected x"):
        tiny_model()(rand(1, 2, 4), [0], [0])


@pytest.mark.parametrize("ablation", [(), ("no_TMP",), ("no_Est",)])
def test_permutation_equivariance(ablation):
    model = tiny_model(seed=7, num_nodes=5, ablation=ablation)
    x, tod, dow = batch(N=5, seed=3)
    perm = torch.tensor([3, 0, 4, 1, 2])
    base = model(x, tod, dow)
    with torch.no_grad():
        model.bank.E_s.copy_(model.bank.E_s[perm])
    permuted = model(x[:, :, perm], tod, dow)
    torch.testing.assert_close(permuted, base[:, :, perm], rtol=1e-6, atol=1e-9)


def test_batch_independence():
    model = tiny_model(seed=8)
    x, tod, dow = batch(B=3, seed=4)
    full = model(x, tod, dow)
    torch.testing.assert_close(model(x[:1], tod[:1], dow[:1]), full[:1], rtol=1e-9, atol=1e-12)
    x2 = x.clone()
    x2[1:] += 5.0
    tod2, dow2 = tod.copy(), dow.copy()
    tod2[1:] = (tod2[1:] + 1) % 4
    torch.testing.assert_close(model(x2, tod2, dow2)[0], full[0], rtol=1e-9, atol=1e-12)


def test_temporal_params_vary_by_sample():
    model = tiny_model(seed=9)
    E_t = model.temporal_query(torch.tensor([0, 1]), torch.tensor([0, 0]))
    p = model.temporal_params(E_t)
    assert p.W_r.shape == (2, 1, 2, 4, 3)
    assert not torch.equal(p.W_r[0], p.W_r[1])
    s = model.spatial_params(model.spatial_query())
    assert s.W_r.shape == (1, 3, 2, 4, 3)


# -- ablations -----------------------------------------------------------------


def test_ablation_leaves():
    names = lambda m: set(parameter_registry(m))
    full = names(tiny_model())
    assert {"bank.D_tod", "bank.D_dow", "bank.E_s", "pool_t.P", "pool_s.P", "pool_st.P", "W_E", "b_E",
            "head_weight", "head_bias"} == full
    assert names(tiny_model(ablation={"no_TMP"})) == full - {"pool_t.P", "bank.D_tod", "bank.D_dow"} | {"shared_t"}
    assert names(tiny_model(ablation={"no_SMP"})) == full - {"pool_s.P"} | {"shared_s"}
    assert names(tiny_model(ablation={"no_STMP"})) == full - {"pool_st.P"} | {"shared_st"}
    assert names(tiny_model(ablation={"no_Et"})) == full - {"bank.D_tod", "bank.D_dow"}
    assert names(tiny_model(ablation={"no_Es"})) == full - {"bank.E_s"}
    assert names(tiny_model(ablation={"no_Est"})) == full - {"W_E", "b_E"}
    assert names(tiny_model(meta_bias=False)) == full | {"bias_t", "bias_s", "bias_st"}


def test_no_et_uses_all_ones_query():
    model = tiny_model(ablation={"no_Et"})
    E_t = model.temporal_query(torch.tensor([1, 2]), torch.tensor([0, 1]))
    assert torch.equal(E_t, torch.ones(2, 4, **f64))
    p = model.temporal_params(E_t)
    assert torch.equal(p.W_r[0], p.W_r[1])


def test_no_es_graph_is_uniform():
    model = tiny_model(ablation={"no_Es"})
    torch.testing.assert_close(adaptive_graph_static(model.spatial_query()), torch.full((3, 3), 1 / 3, **f64))


class SharedSeq2Seq(nn.Module):
    """Plain GCRU encoder-decoder with one parameter set per cell, written independently."""

    def __init__(self, h, K):
        super().__init__()
        self.h, self.K = h, K
        C = 1 + h
        self.enc = nn.ParameterDict()
        for cell in ("t", "s", "d"):
            for g in "ruc":
                self.enc[f"{cell}W{g}"] = nn.Parameter(torch.zeros(K + 1, C, h, **f64))
                self.enc[f"{cell}b{g}"] = nn.Parameter(torch.zeros(h, **f64))
        self.E_s = nn.Parameter(torch.zeros(1, 1, **f64))
        self.W_E = nn.Parameter(torch.zeros(h, 1, **f64))
        self.b_E = nn.Parameter(torch.zeros(1, **f64))
        self.w = nn.Parameter(torch.zeros(h, **f64))
        self.c = nn.Parameter(torch.zeros(1, **f64))

    def conv(self, U, A, W, b):
        Z = b.expand(*U.shape[:2], self.h).clone()
        P = U
        for k in range(self.K + 1):
            Z = Z + P @ W[k]
            P = A @ P
        return Z

    def cell(self, name, x, H, A):
        p = self.enc
        U = torch.cat([x, H], -1)
        r = torch.sigmoid(self.conv(U, A, p[f"{name}Wr"], p[f"{name}br"]))
        u = torch.sigmoid(self.conv(U, A, p[f"{name}Wu"], p[f"{name}bu"]))
        c = torch.tanh(self.conv(torch.cat([x, r * H], -1), A, p[f"{name}Wc"], p[f"{name}bc"]))
        return u * H + (1 - u) * c

    def forward(self, x, T_out):
        B, T, N = x.shape
        A = torch.softmax(torch.relu(self.E_s @ self.E_s.T), -1)
        Ht = Hs = torch.zeros(B, N, self.h, **f64)
        for t in range(T):
            Ht = self.cell("t", x[:, t, :, None], Ht, A)
            Hs = self.cell("s", x[:, t, :, None], Hs, A)
        H = Ht + Hs
        E = H @ self.W_E + self.b_E
        A_st = torch.softmax(torch.relu(E @ E.transpose(1, 2)), -1)
        y = torch.zeros(B, N, 1, **f64)
        outs = []
        for _ in range(T_out):
            H = self.cell("d", y, H, A_st)
            y = (H @ self.w + self.c)[..., None]
            outs.append(y[..., 0])
        return torch.stack(outs, 1)


def test_fully_shared_matches_independent_model():
    model = tiny_model(seed=11, out_steps=3, ablation={"no_TMP", "no_SMP", "no_STMP"})
    ref = SharedSeq2Seq(3, 1)
    with torch.no_grad():
        ref.E_s.data = model.bank.E_s.detach().clone()
        ref.W_E.data = model.W_E.detach().clone()
        ref.b_E.data = model.b_E.detach().clone()
        ref.w.copy_(model.head_weight)
        ref.c.copy_(model.head_bias)
        for cell, flat in (("t", model.shared_t), ("s", model.shared_s), ("d", model.shared_st)):
            gates = split_flat(flat.tolist(), 4, 3, 2)
            for g in "ruc":
                ref.enc[f"{cell}W{g}"].copy_(torch.tensor(gates[g][0], **f64))
                ref.enc[f"{cell}b{g}"].copy_(torch.tensor(gates[g][1], **f64))
    x, tod, dow = batch(seed=12)
    torch.testing.assert_close(model(x, tod, dow), ref(x, 3), rtol=1e-10, atol=1e-12)


# -- gradients and counts ------------------------------------------------------


@pytest.mark.parametrize("ablation", [()] + [(a,) for a in ABLATIONS])
def test_gradient_reaches_every_leaf(ablation):
    model = tiny_model(seed=13, ablation=ablation)
    x, tod, dow = batch(B=4, seed=14)
    y = rand(4, 2, 3, seed=15)
    (model(x, tod, dow) - y).abs().mean().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_parameter_count_formula():
    cfg = tiny_config()
    S = 3 * 2 * 4 * 3 + 9
    expected = 4 * 2 + 7 * 2 + 3 * 2 + (4 + 2 + 2) * S + 3 * 2 + 2 + 3 + 1
    assert count_parameters(HimNet(cfg)) == expected


def test_metrla_count_near_reference():
    n = count_parameters(HimNet(metrla_config()))
    assert abs(n - 1_251_000) / 1_251_000 < 0.15


def test_parameter_count_independent_of_series_length():
    # The model never sees the series length; only N enters, and only through E_s.
    a, b = count_parameters(tiny_model(num_nodes=3)), count_parameters(tiny_model(num_nodes=10))
    assert b - a == 7 * 2
    assert math.isclose(b, a + 7 * tiny_config().d_s)
