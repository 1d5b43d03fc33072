"""Mixture-of-experts layer: noisy top-K routing, capacity dispatch, combine.

Routing is literal: ``P = softmax(x W_f + noise)``, the K largest entries of
each row are kept *without* renormalization and used as combine weights.
Dispatch drops assignments first-come-first-served in flat token order once an
expert's buffer of ``B = ceil(C K T / E)`` slots is full.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .tensor import (
    RngStream,
    ShapeError,
    Tensor,
    NonFiniteError,
    add,
    gather,
    gelu,
    matmul,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    scatter_add,
    stable_softmax,
    zeros,
)

__all__ = [
    "RouterParams",
    "ExpertParams",
    "RoutingOutcome",
    "RoutingReport",
    "route",
    "buffer_capacity",
    "dispatch_with_capacity",
    "expert_forward",
    "moe_forward",
    "balance_loss",
    "balance_loss_from_stats",
    "routing_report",
    "inject_gate_renormalization",
]

ACTIVATIONS = {"gelu": gelu, "relu": relu}

# Deliberate fault used by the verification battery's negative test.
_renormalize_gates = False


@contextlib.contextmanager
def inject_gate_renormalization() -> Iterator[None]:
    """Temporarily renormalize gate values to sum to one per token (a known-wrong variant)."""
    global _renormalize_gates
    _renormalize_gates = True
    try:
        yield
    finally:
        _renormalize_gates = False


@dataclass
class RouterParams:
    w: Tensor  # (d_model, E)

    @property
    def num_experts(self) -> int:
        return self.w.shape[1]


@dataclass
class ExpertParams:
    w1: list[Tensor]
    b1: list[Tensor]
    w2: list[Tensor]
    b2: list[Tensor]
    activation: str = "gelu"

    def __post_init__(self):
        shapes = {(a.shape, b.shape, c.shape, d.shape) for a, b, c, d in zip(self.w1, self.b1, self.w2, self.b2)}
        if len(shapes) > 1:
            raise ShapeError(f"experts must share identical shapes, got {sorted(shapes)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_experts(self) -> int:
        return len(self.w1)

    def tensors(self) -> list[Tensor]:
        return [t for group in zip(self.w1, self.b1, self.w2, self.b2) for t in group]


@dataclass
class RoutingOutcome:
    """One routing operation.

    ``probs`` and ``gates`` are tape tensors so the balance loss and the
    combine step stay differentiable; the integer bookkeeping is plain numpy.
    """

    probs: Tensor  # (T, E)
    indices: np.ndarray  # (T, K) selected experts, rank order
    gates: Tensor  # (T, E), nonzero only at selected positions
    kept: np.ndarray  # (T, K) bool
    per_expert_count: np.ndarray  # (E,) kept assignments
    dispatch_count: np.ndarray  # (E,) assignments before capacity
    capacity: int | None = None

    @property
    def num_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def dropped(self) -> int:
        return int(self.indices.size - self.kept.sum())

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.indices.size if self.indices.size else 0.0

    def selection_mask(self) -> np.ndarray:
        mask = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(mask, self.indices, True, axis=1)
        return mask

    def kept_mask(self) -> np.ndarray:
        mask = np.zeros(self.probs.shape, dtype=bool)
        rows = np.repeat(np.arange(self.num_tokens), self.top_k)
        flat_kept = self.kept.reshape(-1)
        mask[rows[flat_kept], self.indices.reshape(-1)[flat_kept]] = True
        return mask


def _top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p keeps the lower expert index first among ties
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


def route(
    x: Tensor,
    router: RouterParams,
    k: int,
    rng: RngStream | None = None,
    training: bool = False,
    noise: np.ndarray | None = None,
) -> RoutingOutcome:
    """Noisy top-K gating for a (T, d_model) token matrix.

    Exploration noise with std ``1/E`` is added to the router logits when
    ``training``; pass ``noise`` to supply it explicitly instead of drawing
    from ``rng``.
    """
    num_experts = router.num_experts
    if not 1 <= k <= num_experts:
        raise ValueError(f"route: need 1 <= K <= E, got K={k}, E={num_experts}")
    if x.ndim != 2 or x.shape[1] != router.w.shape[0]:
        raise ShapeError(f"route: tokens {x.shape} do not match router weights {router.w.shape}")
    logits = matmul(x, router.w)
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("route: router logits contain NaN or Inf")
    if training:
        if noise is None:
            if rng is None:
                raise ValueError("route: training mode needs an rng or explicit noise")
            noise = rng.normal(logits.shape, 0.0, 1.0 / num_experts)
        logits = add(logits, Tensor(noise))
    probs = stable_softmax(logits, axis=1)
    indices = _top_k_indices(probs.data, k)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, indices, 1.0, axis=1)
    gates = mul(probs, Tensor(mask))
    if _renormalize_gates:
        gates = mul(gates, Tensor(1.0 / gates.data.sum(axis=1, keepdims=True)))
    counts = np.bincount(indices.reshape(-1), minlength=num_experts).astype(np.int64)
    return RoutingOutcome(
        probs=probs,
        indices=indices,
        gates=gates,
        kept=np.ones(indices.shape, dtype=bool),
        per_expert_count=counts.copy(),
        dispatch_count=counts,
    )


def buffer_capacity(c: float, k: int, n: int, l: int, e: int) -> int:
    """Per-expert slots ``ceil(C*K*N*L/E)``.

    ``C`` is read through its decimal repr so 1.2 behaves as 6/5 and integral
    products are not pushed over by binary rounding.
    """
    if c <= 0 or min(k, n, l, e) < 1:
        raise ValueError(f"buffer_capacity: need C > 0 and counts >= 1, got C={c}, K={k}, N={n}, L={l}, E={e}")
    return math.ceil(Fraction(repr(float(c))) * k * n * l / e)


def dispatch_with_capacity(outcome: RoutingOutcome, capacity: int) -> RoutingOutcome:
    """Keep each (token, expert) assignment while the expert has free slots.

    Tokens are scanned in ascending flat order; the K assignments of a token
    target distinct experts so their relative order does not matter.
    """
    t, e = outcome.num_tokens, outcome.num_experts
    onehot = np.zeros((t, e), dtype=np.int64)
    np.put_along_axis(onehot, outcome.indices, 1, axis=1)
    position = np.cumsum(onehot, axis=0)  # 1-based arrival slot per expert
    slot = np.take_along_axis(position, outcome.indices, axis=1)
    kept = slot <= capacity
    counts = np.bincount(outcome.indices[kept], minlength=e).astype(np.int64)
    return replace(outcome, kept=kept, per_expert_count=counts, capacity=int(capacity))


def expert_forward(x: Tensor, experts: ExpertParams, i: int) -> Tensor:
    act = ACTIVATIONS[experts.activation]
    hidden = act(add(matmul(x, experts.w1[i]), experts.b1[i]))
    return add(matmul(hidden, experts.w2[i]), experts.b2[i])


def combine(
    x: Tensor,
    experts: ExpertParams,
    outcome: RoutingOutcome,
    dropout=None,
) -> Tensor:
    """Gate-weighted sum of kept expert outputs; experts visited in index order."""
    t, d = x.shape
    if experts.w1[0].shape[0] != d:
        raise ShapeError(f"moe: tokens {x.shape} do not match expert input {experts.w1[0].shape}")
    if outcome.num_tokens != t or outcome.num_experts != experts.num_experts:
        raise ShapeError(
            f"moe: routing for {outcome.num_tokens} tokens x {outcome.num_experts} experts "
            f"applied to {t} tokens x {experts.num_experts} experts"
        )
    mask = outcome.kept_mask()
    y = zeros((t, d))
    for i in range(experts.num_experts):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        out = expert_forward(gather(x, rows), experts, i)
        if dropout is not None:
            out = dropout(out)
        weight = gather(outcome.gates, (rows, np.full(rows.size, i)))
        y = add(y, scatter_add((t, d), rows, mul(out, weight.reshape(rows.size, 1))))
    return y


def moe_forward(
    x: Tensor,
    router: RouterParams,
    experts: ExpertParams,
    k: int,
    capacity_ratio: float,
    rng: RngStream | None = None,
    training: bool = False,
    tokens_per_batch: tuple[int, int] | None = None,
    outcome: RoutingOutcome | None = None,
    dropout=None,
) -> tuple[Tensor, RoutingOutcome]:
    """Route (unless ``outcome`` is given), apply capacity, combine.

    ``tokens_per_batch`` is ``(N, L)`` for the capacity formula and defaults
    to ``(1, T)``. A token whose assignments were all dropped yields a zero row.
    """
    if x.ndim != 2:
        raise ShapeError(f"moe: expected (tokens, d_model), got {x.shape}")
    if outcome is None:
        n, l = tokens_per_batch or (1, x.shape[0])
        outcome = route(x, router, k, rng, training)
        cap = buffer_capacity(capacity_ratio, k, n, l, router.num_experts)
        outcome = dispatch_with_capacity(outcome, cap)
    return combine(x, experts, outcome, dropout), outcome


def balance_loss_from_stats(m, p_mean, num_experts: int) -> Tensor:
    """``E * sum_i m_i * Pbar_i``; ``m`` is a constant, ``p_mean`` may be taped."""
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    p = p_mean if isinstance(p_mean, Tensor) else Tensor(p_mean)
    if m.shape != (num_experts,) or p.shape != (num_experts,):
        raise ShapeError(f"balance_loss: m {m.shape} and P {p.shape} must both be ({num_experts},)")
    return mul(reduce_sum(mul(p, Tensor(m))), float(num_experts))


def balance_loss(outcome: RoutingOutcome, num_experts: int | None = None) -> Tensor:
    """Load-balance loss of a routing op; gradient flows through ``probs`` only.

    ``m`` uses pre-capacity dispatch counts, so each row of the TopK indicator
    contributes K ones and ``sum(m) == K``.
    """
    e = num_experts or outcome.num_experts
    m = outcome.dispatch_count / outcome.num_tokens
    return balance_loss_from_stats(m, reduce_mean(outcome.probs, axis=0), e)


@dataclass
class RoutingReport:
    """Per-routing-op statistics for one step, ready for the metrics stream."""

    records: list[dict] = field(default_factory=list)

    FIELDS = ("step", "layer_or_group", "expert_counts", "dispatch_counts", "dropped", "assignments", "m", "balance_loss")

    @property
    def drop_rates(self) -> list[float]:
        return [r["dropped"] / r["assignments"] if r["assignments"] else 0.0 for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> RoutingReport:
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            missing = [f for f in cls.FIELDS if f not in rec]
            if missing:
                raise ValueError(f"line {lineno}: missing fields {missing}")
            records.append(rec)
        return cls(records)


def _balance_value(outcome: RoutingOutcome) -> float:
    with no_grad():
        return float(balance_loss(outcome).data)


def routing_report(outcomes: Sequence[RoutingOutcome], step: int = 0) -> RoutingReport:
    if not outcomes:
        raise ValueError("routing_report: no routing outcomes")
    records = []
    for g, out in enumerate(outcomes):
        records.append(
            {
                "step": int(step),
                "layer_or_group": g,
                "expert_counts": [int(c) for c in out.per_expert_count],
                "dispatch_counts": [int(c) for c in out.dispatch_count],
                "dropped": out.dropped,
                "assignments": int(out.indices.size),
                "m": [float(v) for v in out.dispatch_count / out.num_tokens],
                "balance_loss": _balance_value(out),
            }
        )
    return RoutingReport(records)

