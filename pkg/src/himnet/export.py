"""Export generated meta-parameters and their cosine-similarity matrices."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import WindowSet, write_matrix
from .errors import ConfigError
from .model import HimNet


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    unit = rows / np.maximum(norms, 1e-12)
    sim = unit @ unit.T
    return (sim + sim.T) / 2


def write_cosine_csv(path: Path, sim: np.ndarray, labels: Sequence) -> None:
    lines = ["," + ",".join(str(l) for l in labels)]
    for label, row in zip(labels, sim):
        lines.append(f"{label}," + ",".join(f"{v:.8f}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def temporal_grid(model: HimNet) -> np.ndarray:
    """Temporal meta-parameters for every (day-of-week, time-of-day) pair.

    Row ``dow * steps_per_day + tod``; shape [N_w * N_d, S].
    """
    if model.pool_t is None or model.bank.D_tod is None:
        raise ConfigError("model has no temporal meta-parameters (ablated)")
    cfg = model.config
    dow, tod = np.divmod(np.arange(cfg.days_per_week * cfg.steps_per_day), cfg.steps_per_day)
    with torch.no_grad():
        E_t = model.bank.lookup_temporal(torch.as_tensor(tod), torch.as_tensor(dow))
        return (E_t @ model.pool_t.P).double().numpy()


def hourly_rows(model: HimNet, dow: int) -> np.ndarray:
    """Grid row indices for the 24 hours of day ``dow``."""
    cfg = model.config
    if not 0 <= dow < cfg.days_per_week:
        raise ConfigError(f"day-of-week {dow} out of range [0, {cfg.days_per_week})")
    return dow * cfg.steps_per_day + np.arange(24) * cfg.steps_per_day // 24


def spatial_meta(model: HimNet) -> np.ndarray:
    if model.pool_s is None:
        raise ConfigError("model has no spatial meta-parameters (ablated)")
    with torch.no_grad():
        return (model.spatial_query() @ model.pool_s.P).double().numpy()


def st_mixed_meta(model: HimNet, part: WindowSet, samples: Sequence[int]) -> np.ndarray:
    """ST-mixed meta-parameters [len(samples), N, S] for the chosen samples of ``part``."""
    if model.pool_st is None:
        raise ConfigError("model has no ST-mixed meta-parameters (ablated)")
    samples = list(samples)
    bad = [s for s in samples if not 0 <= s < len(part)]
    if bad:
        raise ConfigError(f"sample indices {bad} out of range [0, {len(part)})")
    dtype = model.head_weight.dtype
    x, _, tod, dow = part.batch(np.asarray(samples))
    with torch.no_grad():
        x = torch.as_tensor(x, dtype=dtype)
        tod, dow = torch.as_tensor(tod), torch.as_tensor(dow)
        H = model.encode(x, model.temporal_query(tod, dow), model.spatial_query())
        return (model.st_query(H) @ model.pool_st.P).double().numpy()


def export_meta(model: HimNet, what: str, out_dir: str | Path, dow: int = 0,
                part: Optional[WindowSet] = None, samples: Sequence[int] = (0,),
                nodes: Optional[Sequence[int]] = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit_matrix(name, values):
        path = out / name
        write_matrix(path, values)
        written.append(path)

    def emit_cosine(name, sim, labels):
        path = out / name
        write_cosine_csv(path, sim, labels)
        written.append(path)

    if what == "temporal":
        grid = temporal_grid(model)
        emit_matrix("temporal_meta.stds", grid)
        emit_matrix("D_tod.stds", model.bank.D_tod.detach().double().numpy())
        emit_matrix("D_dow.stds", model.bank.D_dow.detach().double().numpy())
        emit_cosine(f"temporal_hourly_cosine_dow{dow}.csv", cosine_matrix(grid[hourly_rows(model, dow)]),
                    [f"h{h:02d}" for h in range(24)])
    elif what == "spatial":
        theta = spatial_meta(model)
        emit_matrix("spatial_meta.stds", theta)
        if model.bank.E_s is not None:
            emit_matrix("E_s.stds", model.bank.E_s.detach().double().numpy())
        emit_cosine("spatial_cosine.csv", cosine_matrix(theta), [f"n{i}" for i in range(len(theta))])
    elif what == "st_mixed":
        if part is None:
            raise ConfigError("st_mixed export needs a dataset partition")
        N = model.config.num_nodes
        nodes = list(range(N)) if nodes is None else list(nodes)
        if any(not 0 <= n < N for n in nodes):
            raise ConfigError(f"node indices must be in [0, {N})")
        theta = st_mixed_meta(model, part, samples)
        for s, per_node in zip(samples, theta):
            emit_matrix(f"st_mixed_meta_s{s}.stds", per_node)
            emit_cosine(f"st_mixed_cosine_s{s}.csv", cosine_matrix(per_node[nodes]), [f"n{i}" for i in nodes])
    else:
        raise ConfigError(f"unknown export target {what!r}; choose temporal, spatial or st_mixed")
    return written
