"""Learnable temporal dictionaries and the spatial embedding matrix."""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError


def uniform_(t: torch.Tensor, bound: float, generator: torch.Generator) -> torch.Tensor:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
    return t


class EmbeddingBank(nn.Module):
    """Time-of-day table ``D_tod``, day-of-week table ``D_dow`` and spatial matrix ``E_s``.

    Entries start uniform in ``[-a, a]`` with ``a = 1/sqrt(row width)``.
    Any table may be switched off (``None``) when an ablation makes it unused.
    """

    def __init__(self, num_nodes: int, d_tod: int, d_dow: int, d_s: int, steps_per_day: int,
                 days_per_week: int = 7, seed: int = 0, temporal: bool = True, spatial: bool = True,
                 dtype=torch.float32):
        super().__init__()
        for name, value in [("num_nodes", num_nodes), ("d_tod", d_tod), ("d_dow", d_dow), ("d_s", d_s),
                            ("steps_per_day", steps_per_day), ("days_per_week", days_per_week)]:
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        self.d_tod, self.d_dow, self.d_s = d_tod, d_dow, d_s
        self.steps_per_day, self.days_per_week = steps_per_day, days_per_week
        gen = torch.Generator().manual_seed(seed)
        self.D_tod = self.D_dow = self.E_s = None
        if temporal:
            self.D_tod = nn.Parameter(uniform_(torch.empty(steps_per_day, d_tod, dtype=dtype), d_tod ** -0.5, gen))
            self.D_dow = nn.Parameter(uniform_(torch.empty(days_per_week, d_dow, dtype=dtype), d_dow ** -0.5, gen))
        if spatial:
            self.E_s = nn.Parameter(uniform_(torch.empty(num_nodes, d_s, dtype=dtype), d_s ** -0.5, gen))

    @property
    def d_t(self) -> int:
        return self.d_tod + self.d_dow

    def lookup_temporal(self, tod_idx: torch.Tensor, dow_idx: torch.Tensor) -> torch.Tensor:
        """Return ``E_t = D_tod[tod] || D_dow[dow]`` with shape [B, d_tod + d_dow]."""
        if self.D_tod is None:
            raise RuntimeError("temporal tables are disabled for this bank")
        tod_idx = torch.as_tensor(tod_idx, dtype=torch.long)
        dow_idx = torch.as_tensor(dow_idx, dtype=torch.long)
        for name, idx, size in [("tod", tod_idx, self.steps_per_day), ("dow", dow_idx, self.days_per_week)]:
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= size):
                raise IndexError(f"{name} index out of range [0, {size}): {idx.tolist()}")
        return torch.cat([self.D_tod[tod_idx], self.D_dow[dow_idx]], dim=-1)

    def spatial_embedding(self) -> torch.Tensor:
        if self.E_s is None:
            raise RuntimeError("spatial embedding is disabled for this bank")
        return self.E_s


def init_bank(N: int, d_tod: int, d_dow: int, d_s: int, N_d: int, N_w: int = 7, seed: int = 0,
              **kwargs) -> EmbeddingBank:
    return EmbeddingBank(N, d_tod, d_dow, d_s, N_d, N_w, seed=seed, **kwargs)


def lookup_temporal(bank: EmbeddingBank, tod_idx, dow_idx) -> torch.Tensor:
    return bank.lookup_temporal(tod_idx, dow_idx)


def spatial_embedding(bank: EmbeddingBank) -> torch.Tensor:
    return bank.spatial_embedding()


def init_bound(width: int) -> float:
    return 1.0 / math.sqrt(width)
