"""Built-in verification battery.

Each check builds its own random instances from ``seed`` and compares the
implementation against an independent oracle (brute force, enumeration or
central finite differences). Checks return ``(passed, detail)``.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import analysis, moe
from .model import WideNetConfig, count_parameters, enumerate_parameters, init_params, model_forward, named_parameters
from .tensor import (
    RngStream,
    Tensor,
    backward,
    finite_difference_gradient,
    matmul,
    no_grad,
    reduce_mean,
    stable_softmax,
    zero_grad,
)
from .train import cross_entropy, total_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


ZERO_GRADIENT_NORM = 1e-10


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = ZERO_GRADIENT_NORM) -> float:
    """``||a - b|| / max(||a||, ||b||)``.

    Zero when both norms are below ``floor``: some gradients vanish exactly
    (a key bias shifts every attention logit of a query equally) and then the
    analytic side is pure round-off.
    """
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > floor else 0.0


def _random_router(rng: np.random.Generator, d: int, e: int) -> moe.RouterParams:
    return moe.RouterParams(Tensor(rng.normal(size=(d, e)), requires_grad=True))


def _random_experts(rng: np.random.Generator, d: int, f: int, e: int) -> moe.ExpertParams:
    def t(*shape):
        return Tensor(rng.normal(scale=0.5, size=shape), requires_grad=True)

    return moe.ExpertParams([t(d, f) for _ in range(e)], [t(f) for _ in range(e)],
                            [t(f, d) for _ in range(e)], [t(d) for _ in range(e)])  # fmt: skip


def check_softmax(rng: np.random.Generator) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        x = rng.normal(scale=5.0, size=(3, 7))
        s = stable_softmax(Tensor(x), axis=1).data
        ref = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(s - ref).max()), float(np.abs(s.sum(axis=1) - 1).max()))
    big = stable_softmax(Tensor([1000.0, 0.0])).data
    ok = worst < 1e-12 and big[0] == 1.0
    return ok, f"max deviation {worst:.2e}"


def check_engine_gradients(rng: np.random.Generator) -> tuple[bool, str]:
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 5)))

    def f(_):
        return reduce_mean(stable_softmax(matmul(w, x), axis=0) * Tensor(rng_fixed))

    rng_fixed = rng.normal(size=(4, 5))
    loss = f(w)
    backward(loss)
    err = relative_error(w.grad, finite_difference_gradient(f, w))
    return err <= 1e-5, f"relative error {err:.2e}"


def check_balance_values(rng: np.random.Generator) -> tuple[bool, str]:
    e = 4
    uniform = float(moe.balance_loss_from_stats(np.full(e, 1 / e), np.full(e, 1 / e), e).data)
    onehot = float(moe.balance_loss_from_stats(np.eye(e)[0], np.eye(e)[0], e).data)
    worked = float(moe.balance_loss_from_stats([0.75, 0.25], [0.6, 0.4], 2).data)
    floor_ok = True
    for _ in range(200):
        p = rng.dirichlet(np.ones(e))
        floor_ok &= float(moe.balance_loss_from_stats(p, p, e).data) >= 1.0 - 1e-12
    ok = abs(uniform - 1) <= 1e-9 and abs(onehot - e) <= 1e-9 and abs(worked - 1.1) <= 1e-12 and floor_ok
    return ok, f"uniform={uniform!r} one-hot={onehot!r} worked={worked!r} floor={'ok' if floor_ok else 'violated'}"


def check_balance_gradient(rng: np.random.Generator) -> tuple[bool, str]:
    d, e, k, t = 6, 4, 2, 12
    router = _random_router(rng, d, e)
    x = Tensor(rng.normal(size=(t, d)))
    noise = rng.normal(scale=1 / e, size=(t, e))
    ref = moe.route(x, router, k, training=True, noise=noise)

    def f(_):
        out = moe.route(x, router, k, training=True, noise=noise)
        # hold the indicator m fixed at the reference selection
        out = replace(out, dispatch_count=ref.dispatch_count)
        return moe.balance_loss(out)

    loss = f(router.w)
    backward(loss)
    err = relative_error(router.w.grad, finite_difference_gradient(f, router.w, 1e-6))
    return err <= 1e-5, f"relative error {err:.2e}"


def check_capacity(rng: np.random.Generator, instances: int = 300) -> tuple[bool, str]:
    violations = 0
    for _ in range(instances):
        e = int(rng.integers(1, 9))
        k = int(rng.integers(1, e + 1))
        n, l, d = int(rng.integers(1, 4)), int(rng.integers(1, 9)), 5
        c = float(rng.choice([0.5, 1.0, 1.2, 2.0]))
        router = _random_router(rng, d, e)
        x = Tensor(rng.normal(size=(n * l, d)))
        out = moe.route(x, router, k, training=False)
        p = out.probs.data
        sel = out.selection_mask()
        violations += int(np.any(sel.sum(axis=1) != k))
        violations += int(np.any((out.gates.data != 0) & ~sel))
        violations += int(np.any((out.gates.data != 0).sum(axis=1) > k))
        lo = np.where(sel, p, np.inf).min(axis=1)
        hi = np.where(sel, -np.inf, p).max(axis=1)
        violations += int(np.any(lo < hi))
        b = moe.buffer_capacity(c, k, n, l, e)
        kept = moe.dispatch_with_capacity(out, b)
        violations += int(np.any(kept.per_expert_count > b))
        violations += int(kept.kept.sum() > k * n * l)
    tie = moe.route(Tensor(np.zeros((1, 2))), moe.RouterParams(Tensor(np.zeros((2, 2)))), 1)
    violations += int(tie.indices[0, 0] != 0)
    return violations == 0, f"{violations} violations over {instances} instances"


def check_gate_sparsity(rng: np.random.Generator) -> tuple[bool, str]:
    e, k, t, d = 6, 2, 20, 5
    out = moe.route(Tensor(rng.normal(size=(t, d))), _random_router(rng, d, e), k)
    nnz = (out.gates.data != 0).sum(axis=1)
    ok = bool(np.all(nnz == k)) and bool(np.all((out.gates.data != 0) <= out.selection_mask()))
    return ok, f"nonzeros per row in [{nnz.min()}, {nnz.max()}]"


def check_combine_oracle(rng: np.random.Generator) -> tuple[bool, str]:
    d, f, e, k, n, l = 5, 7, 4, 2, 2, 6
    router = _random_router(rng, d, e)
    experts = _random_experts(rng, d, f, e)
    x = Tensor(rng.normal(size=(n * l, d)))
    with no_grad():
        y, out = moe.moe_forward(x, router, experts, k, 1.0, tokens_per_batch=(n, l))
    probs = out.probs.data
    ref = np.zeros_like(x.data)
    for tok in range(n * l):
        for slot in range(k):
            if not out.kept[tok, slot]:
                continue
            i = out.indices[tok, slot]
            h = x.data[tok] @ experts.w1[i].data + experts.b1[i].data
            h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
            ref[tok] += probs[tok, i] * (h @ experts.w2[i].data + experts.b2[i].data)
    err = float(np.abs(y.data - ref).max())
    return err <= 1e-12, f"max deviation {err:.2e}, {out.dropped} dropped"


def check_group_routing(rng: np.random.Generator) -> tuple[bool, str]:
    problems = []
    ids = rng.integers(0, 16, size=(3, 5))
    for g in (1, 2, 4):
        cfg = WideNetConfig(depth=4, d_model=8, d_ff=16, heads=2, groups=g, vocab_size=16, e_embed=4, seq_len=5)
        params = init_params(cfg, int(rng.integers(1 << 30)))
        trace: list = []
        with no_grad():
            _, outcomes = model_forward(ids, params, cfg, RngStream(int(rng.integers(1 << 30))), True, trace)
        moe_events = [ev for ev in trace if ev["event"] == "moe"]
        if len(outcomes) != g or sum(ev["routed"] for ev in moe_events) != g:
            problems.append(f"G={g}: {len(outcomes)} routing ops")
        for ev in moe_events:
            first = moe_events[(ev["block"] // cfg.blocks_per_group) * cfg.blocks_per_group]
            if not (np.array_equal(ev["indices"], first["indices"]) and np.array_equal(ev["kept"], first["kept"])):
                problems.append(f"G={g}: block {ev['block']} disagrees with its group")
    return not problems, "; ".join(problems) or "G in {1, 2, 4} consistent"


def _brute_divergence(v: np.ndarray) -> float:
    n, m = v.shape
    total = 0.0
    for j in range(n):
        for i in range(m):
            for nn in range(n):
                if nn == j:
                    continue
                for mm in range(m):
                    total += abs(v[j, i] - v[nn, mm])
    return total / (m * m * n * (n - 1))


def check_ln_divergence(rng: np.random.Generator) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        v = rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(1, 17))))
        worst = max(worst, abs(analysis.ln_divergence(v) - _brute_divergence(v)))
    return worst <= 1e-12, f"max deviation {worst:.2e}"


def check_parameter_count(rng: np.random.Generator) -> tuple[bool, str]:
    bad = []
    for _ in range(6):
        cfg = WideNetConfig(
            depth=int(rng.integers(1, 5)), d_model=4 * int(rng.integers(1, 4)), d_ff=int(rng.integers(2, 9)),
            heads=2, num_experts=int(rng.integers(1, 5)), top_k=1, groups=1,
            share_attn=bool(rng.integers(2)), share_moe=bool(rng.integers(2)), share_ln=bool(rng.integers(2)),
            use_moe=bool(rng.integers(2)), head_type=str(rng.choice(["gap", "token-cls"])),
            e_embed=int(rng.integers(0, 5)), vocab_size=int(rng.integers(2, 9)), seq_len=int(rng.integers(1, 5)),
        )  # fmt: skip
        if count_parameters(cfg) != enumerate_parameters(init_params(cfg, 0)):
            bad.append(str(cfg))
    return not bad, f"{len(bad)} mismatching configs"


def check_model_gradients(rng: np.random.Generator, max_coords: int = 12) -> tuple[bool, str]:
    cfg = WideNetConfig(depth=2, d_model=8, d_ff=8, heads=2, groups=2, vocab_size=8, e_embed=4, seq_len=4, num_classes=3)
    params = init_params(cfg, int(rng.integers(1 << 30)))
    ids = rng.integers(0, 8, size=(2, 4))
    labels = rng.integers(0, 3, size=2)
    noise_seed = int(rng.integers(1 << 30))
    named = named_parameters(params)

    def loss_fn(_=None):
        logits, outs = model_forward(ids, params, cfg, RngStream(noise_seed), True)
        return total_loss(cross_entropy(logits, labels), [moe.balance_loss(o) for o in outs], cfg.balance_weight)

    zero_grad(named.values())
    backward(loss_fn())
    worst = 0.0
    for name, p in named.items():
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        num = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            with no_grad():
                flat[c] = orig + 1e-5
                up = float(loss_fn().data)
                flat[c] = orig - 1e-5
                down = float(loss_fn().data)
            flat[c] = orig
            num[j] = (up - down) / 2e-5
        worst = max(worst, relative_error(p.grad.reshape(-1)[coords], num))
    return worst <= 1e-5, f"worst relative error {worst:.2e} over {len(named)} tensors"


CHECKS: dict[str, Callable[[np.random.Generator], tuple[bool, str]]] = {
    "softmax": check_softmax,
    "engine-gradients": check_engine_gradients,
    "balance-loss-values": check_balance_values,
    "balance-loss-gradient": check_balance_gradient,
    "routing-capacity": check_capacity,
    "gate-sparsity": check_gate_sparsity,
    "moe-combine-oracle": check_combine_oracle,
    "group-routing": check_group_routing,
    "ln-divergence-brute-force": check_ln_divergence,
    "parameter-count": check_parameter_count,
    "model-gradients": check_model_gradients,
}


def run_battery(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    """Run every check; ``inject_fault`` renormalizes gate values throughout."""
    results = []
    fault = moe.inject_gate_renormalization() if inject_fault else contextlib.nullcontext()
    with fault:
        for i, (name, check) in enumerate(CHECKS.items()):
            rng = np.random.default_rng([seed, i])
            start = time.perf_counter()
            try:
                passed, detail = check(rng)
            except Exception as exc:  # a crashing check is a failing check
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
