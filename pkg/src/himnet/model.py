"""HimNet: GCRU encoders/decoder whose weights come from meta-parameter pools."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Optional

import torch
from torch import nn

from .data import NormStats
from .embeddings import EmbeddingBank, uniform_
from .errors import ConfigError, ShapeError
from .metaparams import (MetaParamPool, adaptive_graph_dynamic, adaptive_graph_static, encode_st,
                         generate_spatial, generate_st_mixed, generate_temporal)

ABLATIONS = ("no_Et", "no_Es", "no_Est", "no_TMP", "no_SMP", "no_STMP")


@dataclass(frozen=True)
class HimNetConfig:
    num_nodes: int
    in_steps: int = 12
    out_steps: int = 12
    hidden_dim: int = 64
    # Graph-convolution order K: kernels W_0..W_K act on A^0..A^K.
    order: int = 1
    d_tod: int = 8
    d_dow: int = 8
    d_s: int = 16
    d_st: int = 16
    steps_per_day: int = 288
    days_per_week: int = 7
    meta_bias: bool = True
    ablation: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}; choose from {ABLATIONS}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "order":
                if value < 0:
                    raise ConfigError(f"order must be >= 0, got {value}")
            elif isinstance(value, int) and not isinstance(value, bool) and value < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {value}")

    @property
    def d_t(self) -> int:
        return self.d_tod + self.d_dow

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["ablation"] = sorted(self.ablation)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HimNetConfig":
        d = dict(d)
        d["ablation"] = frozenset(d.get("ablation", ()))
        return cls(**d)

    def with_ablation(self, *flags: str) -> "HimNetConfig":
        return replace(self, ablation=frozenset(flags))


# --------------------------------------------------------------------------
# Graph convolution and the GCRU cell


class GcruParams(NamedTuple):
    """Gate kernels ``[K+1, C, h]`` and biases ``[h]``, optionally with leading
    context dims ``[B|1, N|1]`` (per-sample, per-node or per sample-node)."""
    W_r: torch.Tensor
    W_u: torch.Tensor
    W_c: torch.Tensor
    b_r: torch.Tensor
    b_u: torch.Tensor
    b_c: torch.Tensor


@dataclass(frozen=True)
class GcruLayout:
    """Flat layout of one GCRU's parameters: three kernels then (optionally) three biases."""
    in_channels: int
    hidden_dim: int
    order: int
    with_bias: bool = True

    @property
    def channels(self) -> int:
        return self.in_channels + self.hidden_dim

    @property
    def kernel_shape(self) -> tuple[int, int, int]:
        return (self.order + 1, self.channels, self.hidden_dim)

    @property
    def kernel_size(self) -> int:
        return math.prod(self.kernel_shape)

    @property
    def size(self) -> int:
        return 3 * self.kernel_size + (3 * self.hidden_dim if self.with_bias else 0)

    @property
    def init_bound(self) -> float:
        return 1.0 / math.sqrt((self.order + 1) * self.channels)

    def unflatten(self, flat: torch.Tensor, lead: tuple = (), bias: Optional[torch.Tensor] = None) -> GcruParams:
        """View ``flat [..., S]`` as GcruParams with leading dims ``lead``.

        ``bias`` ([3, h]) supplies shared biases when the layout carries none.
        """
        if flat.shape[-1] != self.size:
            raise ShapeError(f"flat parameter width {flat.shape[-1]} != layout size {self.size}")
        flat = flat.reshape(*lead, self.size)
        ks, h = self.kernel_size, self.hidden_dim
        kernels = [flat[..., i * ks:(i + 1) * ks].reshape(*lead, *self.kernel_shape) for i in range(3)]
        if self.with_bias:
            off = 3 * ks
            biases = [flat[..., off + i * h:off + (i + 1) * h] for i in range(3)]
        else:
            if bias is None:
                raise ShapeError("layout has no biases and no shared bias was given")
            biases = [bias[i] for i in range(3)]
        return GcruParams(*kernels, *biases)


def graph_conv(U: torch.Tensor, A: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``sum_k A^k U W_k + b`` for U [B, N, C].

    ``A`` is [N, N] or [B, N, N]. ``W`` is [K+1, C, h] (shared) or
    [B|1, N|1, K+1, C, h]; ``b`` is [h] or broadcastable to [B, N, h].
    """
    if U.dim() != 3:
        raise ShapeError(f"U must be [B, N, C], got {tuple(U.shape)}")
    B, N, C = U.shape
    if A.shape[-2:] != (N, N) or (A.dim() == 3 and A.shape[0] != B) or A.dim() not in (2, 3):
        raise ShapeError(f"adjacency {tuple(A.shape)} does not fit U {tuple(U.shape)}")
    if W.shape[-2] != C:
        raise ShapeError(f"kernel expects {W.shape[-2]} input channels, U has {C}")
    hops = W.shape[-3]
    terms = [U]
    for _ in range(1, hops):
        terms.append(torch.matmul(A, terms[-1]))
    X = torch.stack(terms, dim=2)  # [B, N, K+1, C]

    if W.dim() == 3:
        Z = torch.einsum("bnkc,kch->bnh", X, W)
    elif W.dim() == 5:
        lb, ln = W.shape[:2]
        if lb not in (1, B) or ln not in (1, N):
            raise ShapeError(f"kernel context dims {(lb, ln)} do not broadcast against (B, N) = {(B, N)}")
        if lb == 1 and ln == 1:
            Z = torch.einsum("bnkc,kch->bnh", X, W[0, 0])
        elif ln == 1:
            Z = torch.einsum("bnkc,bkch->bnh", X, W[:, 0])
        elif lb == 1:
            Z = torch.einsum("bnkc,nkch->bnh", X, W[0])
        else:
            Z = torch.einsum("bnkc,bnkch->bnh", X, W)
    else:
        raise ShapeError(f"kernel must be 3-D or 5-D, got {tuple(W.shape)}")
    return Z + b


def gcru_step(x_t: torch.Tensor, H_prev: torch.Tensor, params: GcruParams, A: torch.Tensor) -> torch.Tensor:
    U = torch.cat([x_t, H_prev], dim=-1)
    r = torch.sigmoid(graph_conv(U, A, params.W_r, params.b_r))
    u = torch.sigmoid(graph_conv(U, A, params.W_u, params.b_u))
    c = torch.tanh(graph_conv(torch.cat([x_t, r * H_prev], dim=-1), A, params.W_c, params.b_c))
    return u * H_prev + (1 - u) * c


def gcru_rollout(x: torch.Tensor, params: GcruParams, A: torch.Tensor, hidden_dim: int) -> torch.Tensor:
    """Run a GCRU over x [B, T, N] from a zero state; return the final state [B, N, h]."""
    B, T, N = x.shape
    H = x.new_zeros(B, N, hidden_dim)
    for t in range(T):
        H = gcru_step(x[:, t, :, None], H, params, A)
    return H


# --------------------------------------------------------------------------
# The network


def _param(shape, bound, gen, dtype) -> nn.Parameter:
    return nn.Parameter(uniform_(torch.empty(shape, dtype=dtype), bound, gen))


class HimNet(nn.Module):
    """Temporal and spatial meta-encoders feeding an ST-mixed meta-decoder.

    ``forward`` takes normalized history ``x [B, T, N]`` plus the time-of-day
    and day-of-week index of each sample's last step, and returns predictions
    ``[B, T', N]`` in original units.
    """

    def __init__(self, config: HimNetConfig, stats: NormStats = NormStats(0.0, 1.0), seed: int = 0,
                 dtype=torch.float32):
        super().__init__()
        self.config = cfg = config
        abl = cfg.ablation
        self.layout = GcruLayout(1, cfg.hidden_dim, cfg.order, with_bias=cfg.meta_bias)
        S, bound = self.layout.size, self.layout.init_bound
        gen = torch.Generator().manual_seed(seed + 1)

        self.register_buffer("norm_mean", torch.tensor(stats.mean, dtype=torch.float64))
        self.register_buffer("norm_std", torch.tensor(stats.std, dtype=torch.float64))

        use_Et = not ({"no_TMP", "no_Et"} & abl)
        self.bank = EmbeddingBank(cfg.num_nodes, cfg.d_tod, cfg.d_dow, cfg.d_s, cfg.steps_per_day,
                                  cfg.days_per_week, seed=seed, temporal=use_Et,
                                  spatial="no_Es" not in abl, dtype=dtype)

        def source(flag: str, k: int, pool_seed: int):
            if flag in abl:
                return None, _param((S,), bound, gen, dtype)
            return MetaParamPool(k, S, bound, seed=seed + pool_seed, dtype=dtype), None

        self.pool_t, self.shared_t = source("no_TMP", cfg.d_t, 11)
        self.pool_s, self.shared_s = source("no_SMP", cfg.d_s, 12)
        self.pool_st, self.shared_st = source("no_STMP", cfg.d_st, 13)

        self.W_E = self.b_E = None
        if "no_Est" not in abl:
            self.W_E = _param((cfg.hidden_dim, cfg.d_st), cfg.hidden_dim ** -0.5, gen, dtype)
            self.b_E = _param((cfg.d_st,), cfg.hidden_dim ** -0.5, gen, dtype)

        self.bias_t = self.bias_s = self.bias_st = None
        if not cfg.meta_bias:
            self.bias_t = _param((3, cfg.hidden_dim), bound, gen, dtype)
            self.bias_s = _param((3, cfg.hidden_dim), bound, gen, dtype)
            self.bias_st = _param((3, cfg.hidden_dim), bound, gen, dtype)

        self.head_weight = _param((cfg.hidden_dim,), cfg.hidden_dim ** -0.5, gen, dtype)
        self.head_bias = _param((1,), cfg.hidden_dim ** -0.5, gen, dtype)

    # -- queries ---------------------------------------------------------

    def temporal_query(self, tod: torch.Tensor, dow: torch.Tensor) -> torch.Tensor:
        if self.bank.D_tod is None:
            return self.head_weight.new_ones(len(tod), self.config.d_t)
        return self.bank.lookup_temporal(tod, dow)

    def spatial_query(self) -> torch.Tensor:
        if self.bank.E_s is None:
            return self.head_weight.new_ones(self.config.num_nodes, self.config.d_s)
        return self.bank.E_s

    def st_query(self, H: torch.Tensor) -> torch.Tensor:
        if self.W_E is None:
            return H.new_ones(*H.shape[:2], self.config.d_st)
        return encode_st(H, self.W_E, self.b_E)

    # -- parameter generation ---------------------------------------------

    def temporal_params(self, E_t: torch.Tensor) -> GcruParams:
        if self.pool_t is None:
            return self.layout.unflatten(self.shared_t, (), self.bias_t)
        flat = generate_temporal(self.pool_t.P, E_t)
        return self.layout.unflatten(flat, (flat.shape[0], 1), self.bias_t)

    def spatial_params(self, E_s: torch.Tensor) -> GcruParams:
        if self.pool_s is None:
            return self.layout.unflatten(self.shared_s, (), self.bias_s)
        flat = generate_spatial(self.pool_s.P, E_s)
        return self.layout.unflatten(flat, (1, flat.shape[0]), self.bias_s)

    def st_params(self, E_st: torch.Tensor) -> GcruParams:
        if self.pool_st is None:
            return self.layout.unflatten(self.shared_st, (), self.bias_st)
        flat = generate_st_mixed(self.pool_st.P, E_st)
        return self.layout.unflatten(flat, tuple(flat.shape[:2]), self.bias_st)

    # -- forward -----------------------------------------------------------

    def encode(self, x: torch.Tensor, E_t: torch.Tensor, E_s: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[2] != self.config.num_nodes:
            raise ShapeError(f"expected x [B, T, {self.config.num_nodes}], got {tuple(x.shape)}")
        A = adaptive_graph_static(E_s)
        h = self.config.hidden_dim
        H_t = gcru_rollout(x, self.temporal_params(E_t), A, h)
        H_s = gcru_rollout(x, self.spatial_params(E_s), A, h)
        return H_t + H_s

    def output(self, H: torch.Tensor) -> torch.Tensor:
        return torch.matmul(H, self.head_weight) + self.head_bias

    def decode(self, H: torch.Tensor) -> torch.Tensor:
        """Autoregressive rollout from encoder state H [B, N, h]; returns normalized [B, T', N]."""
        E_st = self.st_query(H)
        params = self.st_params(E_st)
        A_st = adaptive_graph_dynamic(E_st)
        step_in = H.new_zeros(*H.shape[:2], 1)  # GO symbol
        outputs = []
        for _ in range(self.config.out_steps):
            H = gcru_step(step_in, H, params, A_st)
            y = self.output(H)
            outputs.append(y)
            step_in = y[..., None]
        return torch.stack(outputs, dim=1)

    def forward_normalized(self, x: torch.Tensor, tod, dow) -> torch.Tensor:
        tod = torch.as_tensor(tod, dtype=torch.long)
        dow = torch.as_tensor(dow, dtype=torch.long)
        H = self.encode(x, self.temporal_query(tod, dow), self.spatial_query())
        return self.decode(H)

    def forward(self, x: torch.Tensor, tod, dow) -> torch.Tensor:
        z = self.forward_normalized(x, tod, dow)
        return z * self.norm_std.to(z.dtype) + self.norm_mean.to(z.dtype)

    @property
    def stats(self) -> NormStats:
        return NormStats(float(self.norm_mean), float(self.norm_std))


def parameter_registry(model: nn.Module) -> dict[str, tuple[int, ...]]:
    return {name: tuple(p.shape) for name, p in model.named_parameters()}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def metrla_config(**overrides) -> HimNetConfig:
    """Model settings used for METR-LA (h=64, all embedding widths 16, two kernels)."""
    base = dict(num_nodes=207, in_steps=12, out_steps=12, hidden_dim=64, order=1,
                d_tod=8, d_dow=8, d_s=16, d_st=16, steps_per_day=288)
    base.update(overrides)
    return HimNetConfig(**base)
