"""Post-hoc diagnostics: layer-norm divergence across blocks and expert utilization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ModelParams

__all__ = [
    "DivergenceReport",
    "UtilizationSummary",
    "ln_divergence",
    "pairwise_block_distance",
    "divergence_report",
    "tokens_per_expert_estimate",
    "read_routing_stream",
    "expert_utilization",
    "write_series_csv",
]

SITES = ("att", "moe")


def _as_blocks(vectors) -> np.ndarray:
    arr = np.asarray([np.asarray(getattr(v, "data", v), dtype=np.float64) for v in vectors])
    if arr.ndim != 2:
        raise ValueError(f"expected equal-length vectors, one per block; got array of shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError("layer-norm divergence needs at least two blocks")
    return arr


def pairwise_block_distance(vectors) -> np.ndarray:
    """``D[j, n]`` = mean over (i, m) of ``|v[j, i] - v[n, m]|``; diagonal zeroed."""
    arr = _as_blocks(vectors)
    n = arr.shape[0]
    out = np.zeros((n, n))
    for j in range(n):
        for k in range(j + 1, n):
            out[j, k] = out[k, j] = np.abs(arr[j][:, None] - arr[k][None, :]).mean()
    return out


def ln_divergence(vectors) -> float:
    """Mean absolute difference over every cross-block element pair.

    ``y = sum_{j != n} sum_{i, m} |v[j, i] - v[n, m]| / (M^2 N (N - 1))`` for
    ``N`` blocks of length-``M`` vectors. Pairs within the same block are
    excluded; pairs of different positions in different blocks are not, so
    identical but non-constant blocks still give ``y > 0``.
    """
    d = pairwise_block_distance(vectors)
    n = d.shape[0]
    return float(d.sum() / (n * (n - 1)))


@dataclass
class DivergenceReport:
    site: str
    y_gamma: float
    y_beta: float
    pair_gamma: np.ndarray
    pair_beta: np.ndarray

    def to_dict(self) -> dict:
        return {
            "site": self.site,
            "y_gamma": self.y_gamma,
            "y_beta": self.y_beta,
            "pair_gamma": self.pair_gamma.tolist(),
            "pair_beta": self.pair_beta.tolist(),
        }


def divergence_report(params: ModelParams, site: str = "moe") -> DivergenceReport:
    """Divergence of the per-block norm vectors in front of the MoE (or attention) layer.

    Blocks whose vectors are the same parameter object (shared layer norm)
    are one vector, not two, so their pair is excluded like the diagonal:
    a fully shared model reports ``y = 0``.
    """
    if site not in SITES:
        raise ValueError(f"site must be one of {SITES}")
    gammas = [getattr(n, f"{site}_gamma") for n in params.norms]
    betas = [getattr(n, f"{site}_beta") for n in params.norms]
    n = len(gammas)
    aliased = np.array([[gammas[j] is gammas[k] for k in range(n)] for j in range(n)])
    pg = np.where(aliased, 0.0, pairwise_block_distance(gammas))
    pb = np.where(aliased, 0.0, pairwise_block_distance(betas))
    return DivergenceReport(site, float(pg.sum() / (n * (n - 1))), float(pb.sum() / (n * (n - 1))), pg, pb)


def tokens_per_expert_estimate(n_images: int, n_patches: int, k: int, e: int) -> float:
    """Tokens each expert sees per routing site per epoch, assuming almost no drops (C near 1)."""
    if min(n_images, n_patches, k, e) < 1:
        raise ValueError("tokens_per_expert_estimate: all counts must be >= 1")
    return n_images * n_patches * k / e


_ROUTING_FIELDS = {"step": int, "layer_or_group": int, "expert_counts": list, "dropped": int, "balance_loss": float}


def read_routing_stream(path: str | Path) -> list[dict]:
    """Parse a routing JSONL stream, rejecting malformed lines with their line number."""
    records = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: record is not an object")
            for name, kind in _ROUTING_FIELDS.items():
                if name not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {name!r}")
                if kind is float and not isinstance(rec[name], (int, float)):
                    raise ValueError(f"{path}:{lineno}: field {name!r} is not numeric")
                if kind is not float and not isinstance(rec[name], kind):
                    raise ValueError(f"{path}:{lineno}: field {name!r} is not {kind.__name__}")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: empty routing stream")
    return records


@dataclass
class UtilizationSummary:
    num_experts: int
    top_k: int
    groups: list[int]
    records_per_step: float
    share: dict[int, list[list[float]]] = field(default_factory=dict)  # group -> per-step expert shares
    drop_rate: dict[int, list[float]] = field(default_factory=dict)
    steps: list[int] = field(default_factory=list)
    kept_per_expert: dict[int, list[int]] = field(default_factory=dict)
    empirical_tokens_per_expert: dict[int, float] = field(default_factory=dict)
    estimated_tokens_per_expert: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "groups": self.groups,
            "records_per_step": self.records_per_step,
            "final_share": {g: s[-1] for g, s in self.share.items()},
            "mean_drop_rate": {g: float(np.mean(d)) for g, d in self.drop_rate.items()},
            "kept_per_expert": self.kept_per_expert,
            "empirical_tokens_per_expert": self.empirical_tokens_per_expert,
            "estimated_tokens_per_expert": self.estimated_tokens_per_expert,
        }

    def series(self) -> Iterable[tuple[int, str, float]]:
        for g in self.groups:
            for step, shares, drop in zip(self.steps, self.share[g], self.drop_rate[g]):
                for i, s in enumerate(shares):
                    yield step, f"group{g}/expert{i}/share", s
                yield step, f"group{g}/drop_rate", drop


def expert_utilization(records: Sequence[dict] | str | Path, top_k: int | None = None) -> UtilizationSummary:
    """Per-expert share over time, drop-rate trajectory, and observed vs estimated tokens per expert.

    The estimate uses the tokens actually routed through each site (the sum
    of ``N_I * N_p`` over the stream), so the gap between empirical and
    estimated load equals the dropped fraction. ``top_k`` is read from the
    records' ``m`` vectors (which sum to K) when not given.
    """
    if not isinstance(records, (list, tuple)):
        records = read_routing_stream(records)
    if not records:
        raise ValueError("expert_utilization: empty routing stream")
    if top_k is None:
        if "m" not in records[0]:
            raise ValueError("expert_utilization: records carry no m vector; pass top_k")
        top_k = int(round(sum(records[0]["m"])))
    num_experts = len(records[0]["expert_counts"])
    groups = sorted({r["layer_or_group"] for r in records})
    steps = sorted({r["step"] for r in records})
    by_key = {(r["step"], r["layer_or_group"]): r for r in records}
    summary = UtilizationSummary(num_experts, top_k, groups, len(records) / len(steps), steps=steps)
    for g in groups:
        shares, drops = [], []
        kept = np.zeros(num_experts, dtype=np.int64)
        assignments = 0
        for s in steps:
            rec = by_key.get((s, g))
            if rec is None:
                continue
            counts = np.asarray(rec["expert_counts"], dtype=np.int64)
            if counts.shape != (num_experts,):
                raise ValueError(f"step {s}, group {g}: expert_counts has {counts.size} entries, expected {num_experts}")
            kept += counts
            total = counts.sum()
            shares.append((counts / total).tolist() if total else [0.0] * num_experts)
            n_assign = rec.get("assignments", int(total + rec["dropped"]))
            drops.append(rec["dropped"] / n_assign if n_assign else 0.0)
            assignments += n_assign
        summary.share[g] = shares
        summary.drop_rate[g] = drops
        summary.kept_per_expert[g] = kept.tolist()
        summary.empirical_tokens_per_expert[g] = float(kept.mean())
        summary.estimated_tokens_per_expert[g] = tokens_per_expert_estimate(1, assignments // top_k, top_k, num_experts) if assignments else 0.0
    return summary


def write_series_csv(path: str | Path, rows: Iterable[tuple[int, str, float]]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "series", "value"])
        for row in rows:
            writer.writerow(row)
    return path
