"""Meta-parameter pools, query-weighted parameter generation and adaptive graphs."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .embeddings import uniform_
from .errors import ConfigError, ShapeError


class MetaParamPool(nn.Module):
    """A ``k x S`` matrix of candidate parameter sets.

    A query ``Q`` of trailing width ``k`` yields ``Q @ P``: one flattened
    parameter set per leading query position.
    """

    def __init__(self, k: int, size: int, bound: float, seed: int = 0,
                 context_count: Optional[int] = None, dtype=torch.float32):
        super().__init__()
        if k < 1 or size < 1:
            raise ConfigError(f"pool needs k >= 1 and S >= 1, got k={k}, S={size}")
        if context_count is not None and k >= context_count:
            raise ConfigError(f"pool size k={k} must be much smaller than the {context_count} contexts it serves")
        gen = torch.Generator().manual_seed(seed)
        self.P = nn.Parameter(uniform_(torch.empty(k, size, dtype=dtype), bound, gen))

    @property
    def k(self) -> int:
        return self.P.shape[0]

    @property
    def size(self) -> int:
        return self.P.shape[1]

    def forward(self, query: torch.Tensor) -> torch.Tensor:
        return generate(self.P, query)


def generate(pool: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Weighted combination of pool rows: ``[..., k] @ [k, S] -> [..., S]``."""
    if isinstance(pool, MetaParamPool):
        pool = pool.P
    if query.shape[-1] != pool.shape[0]:
        raise ShapeError(f"query width {query.shape[-1]} does not match pool size k={pool.shape[0]}")
    return torch.matmul(query, pool)


def generate_temporal(pool_t: torch.Tensor, E_t: torch.Tensor) -> torch.Tensor:
    if E_t.dim() != 2:
        raise ShapeError(f"temporal queries must be [B, d_t], got {tuple(E_t.shape)}")
    return generate(pool_t, E_t)


def generate_spatial(pool_s: torch.Tensor, E_s: torch.Tensor) -> torch.Tensor:
    if E_s.dim() != 2:
        raise ShapeError(f"spatial queries must be [N, d_s], got {tuple(E_s.shape)}")
    return generate(pool_s, E_s)


def generate_st_mixed(pool_st: torch.Tensor, E_st: torch.Tensor) -> torch.Tensor:
    if E_st.dim() != 3:
        raise ShapeError(f"ST-mixed queries must be [B, N, d_st], got {tuple(E_st.shape)}")
    return generate(pool_st, E_st)


def encode_st(H: torch.Tensor, W_E: torch.Tensor, b_E: torch.Tensor) -> torch.Tensor:
    """Project hidden states [B, N, h] to spatiotemporal queries [B, N, d_st]."""
    if H.shape[-1] != W_E.shape[0] or W_E.shape[1] != b_E.shape[-1]:
        raise ShapeError(f"cannot project H{tuple(H.shape)} with W_E{tuple(W_E.shape)}, b_E{tuple(b_E.shape)}")
    return torch.matmul(H, W_E) + b_E


def adaptive_graph_static(E_s: torch.Tensor) -> torch.Tensor:
    """Row-stochastic adjacency ``softmax(relu(E_s E_s^T))``, shape [N, N]."""
    return F.softmax(F.relu(E_s @ E_s.transpose(-1, -2)), dim=-1)


def adaptive_graph_dynamic(E_st: torch.Tensor) -> torch.Tensor:
    """Per-sample adjacency from [B, N, d_st] queries, shape [B, N, N]."""
    if E_st.dim() != 3:
        raise ShapeError(f"expected [B, N, d_st], got {tuple(E_st.shape)}")
    return adaptive_graph_static(E_st)
