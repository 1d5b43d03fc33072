"""Losses, optimizers, schedule, toy datasets, and the train / eval loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import ConfigError, ModelParams, WideNetConfig, init_params, model_forward, named_parameters
from .moe import RoutingOutcome, balance_loss, routing_report
from .tensor import (
    NonFiniteError,
    RngStream,
    Tensor,
    add,
    backward,
    log_softmax,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    zero_grad,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "DataConfig",
    "ToyDataset",
    "OptimizerState",
    "NumericalAbort",
    "cross_entropy",
    "total_loss",
    "optimizer_step",
    "clip_grad_norm",
    "lr_schedule",
    "train",
    "evaluate",
    "derive_seed",
]

# sub-stream identifiers for derive_seed
STREAM_INIT, STREAM_BATCH, STREAM_MODEL, STREAM_DATA = 1, 2, 3, 4


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a named sub-stream of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, term: str, detail: str = ""):
        self.step = step
        self.term = term
        super().__init__(f"non-finite value at step {step} in {term}" + (f": {detail}" if detail else ""))


def _from_dict(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {unknown}")
    return cls(**data)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "cosine"
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    balance_weight: float | None = None  # overrides the model's lambda when set
    eval_every: int = 0
    checkpoint_every: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        errors = []
        if self.steps < 1 or self.batch_size < 1:
            errors.append("steps and batch_size must be >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            errors.append(f"warmup_steps={self.warmup_steps} must lie in [0, steps={self.steps}]")
        if self.schedule not in ("cosine", "constant"):
            errors.append("schedule must be cosine or constant")
        if self.optimizer not in ("sgd-momentum", "adam"):
            errors.append("optimizer must be sgd-momentum or adam")
        if self.lr <= 0:
            errors.append("lr must be > 0")
        for name in ("momentum", "beta1", "beta2", "label_smoothing", "weight_decay"):
            if not 0 <= getattr(self, name) < 1:
                errors.append(f"{name} must lie in [0, 1)")
        if self.balance_weight is not None and self.balance_weight < 0:
            errors.append("balance_weight must be >= 0")
        if self.grad_clip < 0:
            errors.append("grad_clip must be >= 0 (0 disables clipping)")
        if errors:
            raise ConfigError("; ".join(errors))

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        return _from_dict(cls, data, "train")


# --- data -----------------------------------------------------------------------


@dataclass
class DataConfig:
    kind: str = "synthetic-sequence"
    seed: int = 1234
    num_classes: int = 4
    n_train: int = 4096
    n_eval: int = 512
    seq_len: int = 8
    vocab_size: int = 32
    image_size: int = 8
    channels: int = 1
    patch_size: int = 4
    majority_bias: float = 0.5
    noise_std: float = 0.3

    def __post_init__(self):
        if self.kind not in ("synthetic-sequence", "tiny-image"):
            raise ConfigError("data kind must be synthetic-sequence or tiny-image")
        if self.num_classes < 2 or self.n_train < 1 or self.n_eval < 0:
            raise ConfigError("data needs num_classes >= 2, n_train >= 1, n_eval >= 0")
        if self.kind == "synthetic-sequence" and self.vocab_size < self.num_classes:
            raise ConfigError("vocab_size must be at least num_classes")
        if self.kind == "tiny-image":
            if self.image_size % self.patch_size:
                raise ConfigError("image_size must be divisible by patch_size")
            if self.num_classes > (self.image_size // self.patch_size) ** 2:
                raise ConfigError("tiny-image needs one patch cell per class")

    @classmethod
    def from_dict(cls, data: dict) -> DataConfig:
        return _from_dict(cls, data, "data")

    @classmethod
    def for_model(cls, cfg: WideNetConfig, **overrides) -> DataConfig:
        base = dict(num_classes=cfg.num_classes)
        if cfg.embed_kind == "token":
            base.update(kind="synthetic-sequence", seq_len=cfg.seq_len, vocab_size=cfg.vocab_size)
        else:
            base.update(kind="tiny-image", image_size=cfg.image_size, channels=cfg.channels,
                        patch_size=cfg.patch_size)  # fmt: skip
        base.update(overrides)
        return cls(**base)


class ToyDataset:
    """Deterministic train/eval splits regenerated from ``DataConfig.seed``.

    synthetic-sequence: the vocabulary is split into ``num_classes`` clusters
    of token ids. A sequence draws each token's cluster with extra weight on its
    label cluster and is kept only when that cluster is the strict plurality, so
    the label is the majority cluster of the sequence.

    tiny-image: Gaussian pixel noise plus a bright square filling the patch
    cell whose index is the label.

    Eval labels cycle through the classes, so the eval split is balanced. Any
    eval sample that also occurs in the train split is redrawn.
    """

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg
        rng = RngStream(derive_seed(cfg.seed, STREAM_DATA))
        if cfg.kind == "synthetic-sequence":
            perm = rng.permutation(cfg.vocab_size)
            self.cluster_of = np.empty(cfg.vocab_size, dtype=np.int64)
            self.cluster_of[perm] = np.arange(cfg.vocab_size) % cfg.num_classes
            self.members = [np.flatnonzero(self.cluster_of == c) for c in range(cfg.num_classes)]
        train_labels = rng.integers(cfg.num_classes, cfg.n_train)
        self.train_x = np.stack([self._sample(rng, int(c)) for c in train_labels])
        self.train_y = train_labels
        seen = {x.tobytes() for x in self.train_x}
        eval_x = []
        for i in range(cfg.n_eval):
            c = i % cfg.num_classes
            x = self._sample(rng, c)
            while x.tobytes() in seen:
                x = self._sample(rng, c)
            eval_x.append(x)
        shape = self.train_x.shape[1:]
        dtype = self.train_x.dtype
        self.eval_x = np.stack(eval_x) if eval_x else np.zeros((0, *shape), dtype=dtype)
        self.eval_y = np.arange(cfg.n_eval, dtype=np.int64) % cfg.num_classes

    def _sample(self, rng: RngStream, label: int) -> np.ndarray:
        cfg = self.cfg
        if cfg.kind == "tiny-image":
            img = rng.normal((cfg.channels, cfg.image_size, cfg.image_size), 0.0, cfg.noise_std)
            cells = cfg.image_size // cfg.patch_size
            r, c = divmod(label, cells)
            p = cfg.patch_size
            img[:, r * p : (r + 1) * p, c * p : (c + 1) * p] += 1.0
            return img
        k = cfg.num_classes
        probs = np.full(k, (1.0 - cfg.majority_bias) / (k - 1))
        probs[label] = cfg.majority_bias
        cdf = np.cumsum(probs)
        while True:
            clusters = np.minimum(np.searchsorted(cdf, rng.uniform(cfg.seq_len), side="right"), k - 1)
            counts = np.bincount(clusters, minlength=k)
            top = counts.max()
            if counts[label] == top and (counts == top).sum() == 1:
                break
        picks = rng.uniform(cfg.seq_len)
        return np.array(
            [self.members[c][min(int(u * len(self.members[c])), len(self.members[c]) - 1)] for c, u in zip(clusters, picks)],
            dtype=np.int64,
        )

    def majority_label(self, x: np.ndarray) -> int:
        return int(np.argmax(np.bincount(self.cluster_of[x], minlength=self.cfg.num_classes)))

    def train_batch(self, step: int, batch_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = RngStream(derive_seed(seed, STREAM_BATCH, step))
        idx = rng.integers(len(self.train_y), batch_size)
        return self.train_x[idx], self.train_y[idx]


# --- losses ---------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Batch mean of ``-sum_c q_c log softmax(logits)_c``.

    ``q`` puts ``1 - s`` on the true class and ``s / (classes - 1)`` elsewhere.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"cross_entropy: label ids must lie in [0, {classes})")
    if not 0 <= smoothing < 1:
        raise ValueError("cross_entropy: smoothing must lie in [0, 1)")
    off = smoothing / (classes - 1) if classes > 1 else 0.0
    target = np.full((n, classes), off)
    target[np.arange(n), labels] = 1.0 - smoothing
    return mul(reduce_sum(mul(log_softmax(logits, axis=1), Tensor(target))), -1.0 / n)


def total_loss(l_main: Tensor, balance_losses: Sequence[Tensor], weight: float) -> Tensor:
    """Main loss plus ``weight`` times the sum of per-routing-op balance losses."""
    loss = l_main
    for term in balance_losses:
        loss = add(loss, mul(term, weight))
    return loss


# --- optimization ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def from_config(cls, tcfg: TrainConfig) -> OptimizerState:
        return cls(tcfg.optimizer, 0, {}, tcfg.momentum, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([self.step], dtype=np.float64)}
        for pname, slots in self.slots.items():
            for sname, arr in slots.items():
                out[f"optim.{sname}.{pname}"] = arr
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step = int(arrays["optim.step"][0])
        self.slots = {}
        for key, arr in arrays.items():
            if key == "optim.step" or not key.startswith("optim."):
                continue
            _, sname, pname = key.split(".", 2)
            self.slots.setdefault(pname, {})[sname] = arr.copy()


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Update every parameter in place from its ``grad``.

    sgd-momentum: ``v = mu v + g; w -= lr v``. adam: bias-corrected moments,
    with decoupled weight decay when ``weight_decay`` is set.
    """
    state.step += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"optimizer_step: gradient {g.shape} vs parameter {p.shape} for {name}")
        slots = state.slots.setdefault(name, {})
        if state.kind == "sgd-momentum":
            v = slots.setdefault("v", np.zeros_like(p.data))
            if v.shape != p.shape:
                raise ValueError(f"optimizer_step: slot shape {v.shape} vs parameter {p.shape} for {name}")
            v *= state.momentum
            v += g
            p.data -= lr * v
        elif state.kind == "adam":
            m = slots.setdefault("m", np.zeros_like(p.data))
            v = slots.setdefault("v", np.zeros_like(p.data))
            if m.shape != p.shape:
                raise ValueError(f"optimizer_step: slot shape {m.shape} vs parameter {p.shape} for {name}")
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1**state.step)
            v_hat = v / (1 - state.beta2**state.step)
            if state.weight_decay:
                p.data -= lr * state.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def lr_schedule(step: int, warmup: int, total: int, peak: float, kind: str = "cosine") -> float:
    """Linear warmup to ``peak``, then cosine decay to zero at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"lr_schedule: step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if kind == "constant" or total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


# --- loops ----------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    groups: list[dict]

    def as_record(self, step: int) -> dict:
        return {"kind": "eval", "step": step, "accuracy": self.accuracy, "loss": self.loss,
                "drop_rate": [g["drop_rate"] for g in self.groups],
                "expert_share": [g["expert_share"] for g in self.groups]}  # fmt: skip


def evaluate(params: ModelParams, cfg: WideNetConfig, data: ToyDataset, batch_size: int = 256) -> EvalResult:
    """Accuracy, mean unsmoothed loss and per-group routing summary on the eval split."""
    n = len(data.eval_y)
    if n == 0:
        raise ValueError("evaluate: empty eval split")
    correct = 0
    loss_sum = 0.0
    counts = dispatch = None
    dropped = assignments = None
    with no_grad():
        for start in range(0, n, batch_size):
            x = data.eval_x[start : start + batch_size]
            y = data.eval_y[start : start + batch_size]
            logits, outcomes = model_forward(x, params, cfg, None, training=False)
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            loss_sum += float(cross_entropy(logits, y).data) * len(y)
            if outcomes:
                c = np.stack([o.per_expert_count for o in outcomes])
                d = np.stack([o.dispatch_count for o in outcomes])
                dr = np.array([o.dropped for o in outcomes])
                a = np.array([o.indices.size for o in outcomes])
                counts, dispatch = (c, d) if counts is None else (counts + c, dispatch + d)
                dropped, assignments = (dr, a) if dropped is None else (dropped + dr, assignments + a)
    groups = []
    if counts is not None:
        for g in range(len(counts)):
            groups.append(
                {
                    "group": g,
                    "expert_counts": counts[g].tolist(),
                    "dispatch_counts": dispatch[g].tolist(),
                    "dropped": int(dropped[g]),
                    "drop_rate": float(dropped[g] / assignments[g]),
                    "expert_share": (counts[g] / max(counts[g].sum(), 1)).tolist(),
                }
            )
    return EvalResult(correct / n, loss_sum / n, groups)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    routing: list[dict]
    optimizer: OptimizerState
    checkpoint: Path | None = None
    final_eval: EvalResult | None = None


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _checkpoint(out: Path, name: str, cfg, params, opt, step, tcfg, dcfg) -> Path:
    meta = {"step": step, "train": asdict(tcfg), "data": asdict(dcfg), "optimizer": opt.kind}
    return save_checkpoint(out / name, cfg, params, opt.to_arrays(), meta)


def train(
    cfg: WideNetConfig,
    data: ToyDataset,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | Checkpoint | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run ``tcfg.steps`` optimizer steps from a fresh init or a checkpoint.

    Every step uses its own derived noise/dropout stream and batch, so a run
    resumed from a checkpoint continues bit-identically. ``stop_at`` ends the
    loop early (after writing a checkpoint) without changing the schedule.
    Files written under ``out_dir``: ``config.json``, ``metrics.jsonl``,
    ``routing.jsonl``, ``checkpoints/step_*`` and ``checkpoints/final``.
    """
    weight = cfg.balance_weight if tcfg.balance_weight is None else tcfg.balance_weight
    opt = OptimizerState.from_config(tcfg)
    start = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, expect=cfg)
        params = ck.params
        opt.load_arrays(ck.extra)
        start = int(ck.meta["step"])
    else:
        params = init_params(cfg, RngStream(derive_seed(tcfg.seed, STREAM_INIT)))
    named = named_parameters(params)
    end = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)

    out = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    routing: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        echo = {"model": cfg.to_dict(), "train": asdict(tcfg), "data": asdict(data.cfg)}
        (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True))
        if start:
            history = [r for r in _read_jsonl(out / "metrics.jsonl") if r["step"] < start]
            routing = [r for r in _read_jsonl(out / "routing.jsonl") if r["step"] < start]
        metrics_fh = (out / "metrics.jsonl").open("w")
        routing_fh = (out / "routing.jsonl").open("w")
        for r in history:
            metrics_fh.write(json.dumps(r, sort_keys=True) + "\n")
        for r in routing:
            routing_fh.write(json.dumps(r, sort_keys=True) + "\n")
    n_prior, n_prior_routing = len(history), len(routing)

    def emit(record: dict, routing_records: list[dict] = ()) -> None:
        history.append(record)
        routing.extend(routing_records)
        if out is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            for r in routing_records:
                routing_fh.write(json.dumps(r, sort_keys=True) + "\n")

    last_ckpt = None
    try:
        for step in range(start, end):
            lr = lr_schedule(step, tcfg.warmup_steps, tcfg.steps, tcfg.lr, tcfg.schedule)
            x, y = data.train_batch(step, tcfg.batch_size, tcfg.seed)
            rng = RngStream(derive_seed(tcfg.seed, STREAM_MODEL, step))
            zero_grad(named.values())
            try:
                logits, outcomes = model_forward(x, params, cfg, rng, training=True)
            except NonFiniteError as exc:
                raise NumericalAbort(step, "forward", str(exc)) from None
            try:
                l_main = cross_entropy(logits, y, tcfg.label_smoothing)
            except NonFiniteError as exc:
                raise NumericalAbort(step, "l_main", str(exc)) from None
            balances = []
            for g, o in enumerate(outcomes):
                try:
                    balances.append(balance_loss(o))
                except NonFiniteError as exc:
                    raise NumericalAbort(step, f"l_balance[{g}]", str(exc)) from None
            loss = total_loss(l_main, balances, weight)
            try:
                backward(loss)
            except NonFiniteError as exc:
                raise NumericalAbort(step, "backward", str(exc)) from None
            grad_norm = clip_grad_norm(named, tcfg.grad_clip)
            if not math.isfinite(grad_norm):
                raise NumericalAbort(step, "gradients")
            optimizer_step(named, opt, lr)

            record = {
                "kind": "train",
                "step": step,
                "l_main": float(l_main.data),
                "l_balance": [float(b.data) for b in balances],
                "total": float(loss.data),
                "lr": lr,
                "drop_rate": [o.drop_rate for o in outcomes],
                "accuracy": float(np.mean(np.argmax(logits.data, axis=1) == y)),
                "grad_norm": grad_norm,
            }
            emit(record, routing_report(outcomes, step).records if outcomes else [])
            done = step + 1
            if tcfg.eval_every and done % tcfg.eval_every == 0 and len(data.eval_y):
                emit(evaluate(params, cfg, data, tcfg.eval_batch_size).as_record(done))
            if out is not None and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
                last_ckpt = _checkpoint(out / "checkpoints", f"step_{done:06d}", cfg, params, opt, done, tcfg, data.cfg)
    finally:
        if out is not None:
            metrics_fh.close()
            routing_fh.close()

    final_eval = evaluate(params, cfg, data, tcfg.eval_batch_size) if len(data.eval_y) else None
    if out is not None:
        name = "final" if end == tcfg.steps else f"step_{end:06d}"
        last_ckpt = _checkpoint(out / "checkpoints", name, cfg, params, opt, end, tcfg, data.cfg)
        if final_eval is not None:
            (out / "eval.json").write_text(json.dumps(final_eval.as_record(end), indent=1, sort_keys=True))
    log.info("trained steps %d..%d", start, end)
    return TrainResult(params, history[n_prior:], routing[n_prior_routing:], opt, last_ckpt, final_eval)
