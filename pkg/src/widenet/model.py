"""WideNet: one shared attention + MoE block applied ``depth`` times.

Only the layer norms are indexed by depth. Blocks are pre-norm::

    x' = LN_att[j](x);  x = MHA(x') + x
    x" = LN_moe[j](x);  x = MoE(x") + x

Routing groups: the ``depth`` blocks are split into ``groups`` contiguous runs.
The first block of a run routes and applies capacity; later blocks in the run
reuse its expert indices, gate values and kept flags on their own inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .moe import ExpertParams, RouterParams, RoutingOutcome, combine, expert_forward, moe_forward
from .tensor import (
    RngStream,
    ShapeError,
    Tensor,
    add,
    concat,
    gather,
    matmul,
    mul,
    power,
    reduce_mean,
    reshape,
    stable_softmax,
    sub,
    transpose,
)

__all__ = [
    "WideNetConfig",
    "AttentionParams",
    "SharedBlockParams",
    "BlockNorms",
    "EmbedParams",
    "ModelParams",
    "init_params",
    "named_parameters",
    "layer_norm",
    "mha_forward",
    "block_forward",
    "model_forward",
    "patch_embed",
    "token_embed_factorized",
    "head_forward",
    "count_parameters",
    "enumerate_parameters",
    "group_of_block",
]

HEAD_TYPES = ("gap", "token-cls")
EMBED_KINDS = ("token", "patch")


class ConfigError(ValueError):
    """Invalid architecture or training configuration."""


@dataclass
class WideNetConfig:
    depth: int = 4
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    num_experts: int = 4
    top_k: int = 2
    capacity_ratio: float = 1.2
    balance_weight: float = 0.01
    groups: int = 4
    share_attn: bool = True
    share_moe: bool = True
    share_ln: bool = False
    use_moe: bool = True
    head_type: str = "gap"
    embed_kind: str = "token"
    vocab_size: int = 32
    e_embed: int = 128  # 0 disables factorization
    seq_len: int = 8
    image_size: int = 8
    patch_size: int = 4
    channels: int = 1
    num_classes: int = 4
    dropout: float = 0.0
    activation: str = "gelu"
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errors = []
        for name in ("depth", "d_model", "d_ff", "heads", "num_experts", "top_k", "groups", "num_classes"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.groups >= 1 and self.depth % self.groups:
            errors.append(f"groups={self.groups} must divide depth={self.depth}")
        if self.top_k > self.num_experts:
            errors.append(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.heads >= 1 and self.d_model % self.heads:
            errors.append(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.balance_weight < 0:
            errors.append("balance_weight must be >= 0")
        if self.capacity_ratio <= 0:
            errors.append("capacity_ratio must be > 0")
        if not 0 <= self.dropout < 1:
            errors.append("dropout must lie in [0, 1)")
        if self.head_type not in HEAD_TYPES:
            errors.append(f"head_type must be one of {HEAD_TYPES}")
        if self.embed_kind not in EMBED_KINDS:
            errors.append(f"embed_kind must be one of {EMBED_KINDS}")
        if self.embed_kind == "patch":
            if self.patch_size < 1 or self.image_size % self.patch_size:
                errors.append(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        elif self.vocab_size < 1 or self.seq_len < 1 or self.e_embed < 0:
            errors.append("token embedding needs vocab_size >= 1, seq_len >= 1, e_embed >= 0")
        if self.activation not in ("gelu", "relu"):
            errors.append("activation must be gelu or relu")
        if self.ln_eps <= 0:
            errors.append("ln_eps must be > 0")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def input_len(self) -> int:
        return self.num_patches if self.embed_kind == "patch" else self.seq_len

    @property
    def tokens_per_example(self) -> int:
        return self.input_len + (1 if self.head_type == "token-cls" else 0)

    @property
    def blocks_per_group(self) -> int:
        return self.depth // self.groups

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> WideNetConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class SharedBlockParams:
    attn: AttentionParams
    router: RouterParams | None
    experts: ExpertParams  # a single "expert" is the plain FFN when use_moe is off


@dataclass
class BlockNorms:
    att_gamma: Tensor
    att_beta: Tensor
    moe_gamma: Tensor
    moe_beta: Tensor


@dataclass
class EmbedParams:
    kind: str
    pos: Tensor
    table: Tensor | None = None  # token: (vocab, e_embed or d_model)
    proj: Tensor | None = None  # token, factorized: (e_embed, d_model)
    w: Tensor | None = None  # patch: (p*p*C, d_model)
    b: Tensor | None = None


@dataclass
class ModelParams:
    embed: EmbedParams
    cls_token: Tensor | None
    blocks: list[SharedBlockParams]
    norms: list[BlockNorms]
    final_gamma: Tensor
    final_beta: Tensor
    head_w: Tensor
    head_b: Tensor
    config: WideNetConfig = field(repr=False, default=None)


# --- construction -------------------------------------------------------------


def _matrix(rng: RngStream, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.truncated_normal(shape, std), requires_grad=True)


def _zeros(n) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _init_attention(rng: RngStream, d: int) -> AttentionParams:
    return AttentionParams(
        wq=_matrix(rng, (d, d)), bq=_zeros(d),
        wk=_matrix(rng, (d, d)), bk=_zeros(d),
        wv=_matrix(rng, (d, d)), bv=_zeros(d),
        wo=_matrix(rng, (d, d)), bo=_zeros(d),
    )  # fmt: skip


def _init_experts(rng: RngStream, cfg: WideNetConfig, count: int) -> ExpertParams:
    w1, b1, w2, b2 = [], [], [], []
    for _ in range(count):
        w1.append(_matrix(rng, (cfg.d_model, cfg.d_ff)))
        b1.append(_zeros(cfg.d_ff))
        w2.append(_matrix(rng, (cfg.d_ff, cfg.d_model)))
        b2.append(_zeros(cfg.d_model))
    return ExpertParams(w1, b1, w2, b2, activation=cfg.activation)


def _init_norms(d: int) -> BlockNorms:
    return BlockNorms(_ones(d), _zeros(d), _ones(d), _zeros(d))


def init_params(cfg: WideNetConfig, seed: int | RngStream = 0) -> ModelParams:
    """Truncated-normal(0.02) matrices, zero biases/betas, unit gammas.

    The router starts at std ``0.02 / sqrt(d_model)`` so initial routing is
    close to uniform.
    """
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    d = cfg.d_model
    pos = _matrix(rng, (cfg.tokens_per_example, d))
    if cfg.embed_kind == "token":
        if cfg.e_embed:
            embed = EmbedParams("token", pos, table=_matrix(rng, (cfg.vocab_size, cfg.e_embed)),
                                proj=_matrix(rng, (cfg.e_embed, d)))
        else:
            embed = EmbedParams("token", pos, table=_matrix(rng, (cfg.vocab_size, d)))
    else:
        patch_dim = cfg.patch_size**2 * cfg.channels
        embed = EmbedParams("patch", pos, w=_matrix(rng, (patch_dim, d)), b=_zeros(d))
    cls_token = _matrix(rng, (d,)) if cfg.head_type == "token-cls" else None

    def new_router():
        if not cfg.use_moe:
            return None
        return RouterParams(_matrix(rng, (d, cfg.num_experts), 0.02 / math.sqrt(d)))

    n_experts = cfg.num_experts if cfg.use_moe else 1
    shared_attn = _init_attention(rng, d) if cfg.share_attn else None
    shared_router = new_router() if cfg.share_moe else None
    shared_experts = _init_experts(rng, cfg, n_experts) if cfg.share_moe else None
    blocks: list[SharedBlockParams] = []
    for _ in range(cfg.depth):
        attn = shared_attn or _init_attention(rng, d)
        if cfg.share_moe:
            router, experts = shared_router, shared_experts
        else:
            router, experts = new_router(), _init_experts(rng, cfg, n_experts)
        if blocks and blocks[-1].attn is attn and blocks[-1].experts is experts:
            blocks.append(blocks[-1])
        else:
            blocks.append(SharedBlockParams(attn, router, experts))
    if cfg.share_ln:
        norms = [_init_norms(d)] * cfg.depth
    else:
        norms = [_init_norms(d) for _ in range(cfg.depth)]
    return ModelParams(
        embed=embed,
        cls_token=cls_token,
        blocks=blocks,
        norms=norms,
        final_gamma=_ones(d),
        final_beta=_zeros(d),
        head_w=_matrix(rng, (d, cfg.num_classes)),
        head_b=_zeros(cfg.num_classes),
        config=cfg,
    )


def named_parameters(params: ModelParams) -> dict[str, Tensor]:
    """Unique trainable tensors in a fixed order, named at first occurrence."""
    out: dict[str, Tensor] = {}
    seen: set[int] = set()

    def put(name: str, t: Tensor | None) -> None:
        if t is not None and id(t) not in seen:
            seen.add(id(t))
            out[name] = t

    e = params.embed
    for attr in ("table", "proj", "w", "b", "pos"):
        put(f"embed.{attr}", getattr(e, attr))
    put("cls_token", params.cls_token)
    for j, blk in enumerate(params.blocks):
        for f in fields(AttentionParams):
            put(f"blocks.{j}.attn.{f.name}", getattr(blk.attn, f.name))
        if blk.router is not None:
            put(f"blocks.{j}.router.w", blk.router.w)
        for i in range(blk.experts.num_experts):
            for attr in ("w1", "b1", "w2", "b2"):
                put(f"blocks.{j}.experts.{i}.{attr}", getattr(blk.experts, attr)[i])
    for j, nrm in enumerate(params.norms):
        for f in fields(BlockNorms):
            put(f"norms.{j}.{f.name}", getattr(nrm, f.name))
    put("final_norm.gamma", params.final_gamma)
    put("final_norm.beta", params.final_beta)
    put("head.w", params.head_w)
    put("head.b", params.head_b)
    return out


def enumerate_parameters(params: ModelParams) -> int:
    return sum(t.size for t in named_parameters(params).values())


def _attention_count(d: int) -> int:
    return 4 * (d * d + d)


def _ffn_count(d: int, f: int) -> int:
    return d * f + f + f * d + d


def count_parameters(cfg: WideNetConfig) -> int:
    """Closed-form trainable parameter count for ``cfg``."""
    d, depth = cfg.d_model, cfg.depth
    if cfg.embed_kind == "token":
        embed = cfg.vocab_size * cfg.e_embed + cfg.e_embed * d if cfg.e_embed else cfg.vocab_size * d
    else:
        embed = cfg.patch_size**2 * cfg.channels * d + d
    embed += cfg.tokens_per_example * d
    cls = d if cfg.head_type == "token-cls" else 0
    attn = _attention_count(d) * (1 if cfg.share_attn else depth)
    if cfg.use_moe:
        moe_one = d * cfg.num_experts + cfg.num_experts * _ffn_count(d, cfg.d_ff)
    else:
        moe_one = _ffn_count(d, cfg.d_ff)
    moe = moe_one * (1 if cfg.share_moe else depth)
    norms = 4 * d * (1 if cfg.share_ln else depth)
    final = 2 * d
    head = d * cfg.num_classes + cfg.num_classes
    return embed + cls + attn + moe + norms + final + head


# --- layers -------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with the biased variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    centered = sub(x, reduce_mean(x, axis=-1, keepdims=True))
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    return add(mul(normed, gamma), beta)


def mha_forward(x: Tensor, attn: AttentionParams, heads: int, seq_len: int | None = None) -> Tensor:
    """Multi-head self-attention over (N*L, d) tokens grouped in sequences of ``seq_len``."""
    t, d = x.shape
    seq_len = seq_len or t
    if d % heads:
        raise ShapeError(f"mha: d_model={d} not divisible by heads={heads}")
    if t % seq_len:
        raise ShapeError(f"mha: {t} tokens do not split into sequences of {seq_len}")
    if attn.wq.shape != (d, d):
        raise ShapeError(f"mha: tokens {x.shape} vs projection {attn.wq.shape}")
    n, dh = t // seq_len, d // heads

    def split(w, b):
        proj = add(matmul(x, w), b)
        return transpose(reshape(proj, (n, seq_len, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(attn.wq, attn.bq), split(attn.wk, attn.bk), split(attn.wv, attn.bv)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = stable_softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    return add(matmul(reshape(ctx, (t, d)), attn.wo), attn.bo)


def make_dropout(rate: float, rng: RngStream | None, training: bool) -> Callable[[Tensor], Tensor] | None:
    if not training or rate == 0:
        return None
    if rng is None:
        raise ValueError("dropout during training needs an rng")

    def apply(t: Tensor) -> Tensor:
        keep = (rng.uniform(t.shape) >= rate) / (1.0 - rate)
        return mul(t, Tensor(keep))

    return apply


def block_forward(
    x: Tensor,
    shared: SharedBlockParams,
    norms: BlockNorms,
    cfg: WideNetConfig,
    rng: RngStream | None = None,
    training: bool = False,
    seq_len: int | None = None,
    reuse: RoutingOutcome | None = None,
    trace: list | None = None,
    index: int = 0,
) -> tuple[Tensor, RoutingOutcome | None]:
    """One pre-norm block. Returns the new routing outcome if this block routed."""
    seq_len = seq_len or x.shape[0]
    dropout = make_dropout(cfg.dropout, rng, training)

    def note(event: str, **extra):
        if trace is not None:
            trace.append({"block": index, "event": event, **extra})

    h = layer_norm(x, norms.att_gamma, norms.att_beta, cfg.ln_eps)
    note("ln_att", gamma=id(norms.att_gamma))
    a = mha_forward(h, shared.attn, cfg.heads, seq_len)
    if dropout is not None:
        a = dropout(a)
    note("mha", attn=id(shared.attn))
    x = add(a, x)
    note("residual_att")
    h = layer_norm(x, norms.moe_gamma, norms.moe_beta, cfg.ln_eps)
    note("ln_moe", gamma=id(norms.moe_gamma))
    routed = None
    if cfg.use_moe:
        if reuse is None:
            m, routed = moe_forward(
                h, shared.router, shared.experts, cfg.top_k, cfg.capacity_ratio, rng, training,
                tokens_per_batch=(x.shape[0] // seq_len, seq_len), dropout=dropout,
            )  # fmt: skip
            used = routed
        else:
            m = combine(h, shared.experts, reuse, dropout)
            used = reuse
        note("moe", experts=id(shared.experts), router=id(shared.router), routed=reuse is None,
             indices=used.indices, kept=used.kept)  # fmt: skip
    else:
        m = expert_forward(h, shared.experts, 0)
        if dropout is not None:
            m = dropout(m)
        note("ffn", experts=id(shared.experts))
    x = add(m, x)
    note("residual_moe")
    return x, routed


def group_of_block(j: int, cfg: WideNetConfig) -> int:
    return j // cfg.blocks_per_group


# --- embeddings and heads -----------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    n, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch size {patch}")
    grid = images.reshape(n, c, h // patch, patch, w // patch, patch)
    return grid.transpose(0, 2, 4, 1, 3, 5).reshape(n, (h // patch) * (w // patch), c * patch * patch)


def _prepend_cls(tokens: Tensor, cls_token: Tensor | None) -> Tensor:
    if cls_token is None:
        return tokens
    n, _, d = tokens.shape
    cls = mul(Tensor(np.ones((n, 1, 1))), reshape(cls_token, (1, 1, d)))
    return concat([cls, tokens], axis=1)


def patch_embed(images: np.ndarray, embed: EmbedParams, cls_token: Tensor | None, patch: int) -> Tensor:
    """(N, C, H, W) images to (N, L[+1], d) tokens plus positional embeddings."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"patch_embed: expected (N, C, H, W), got {images.shape}")
    patches = patchify(images, patch)
    if patches.shape[-1] != embed.w.shape[0]:
        raise ShapeError(f"patch_embed: patch vector {patches.shape[-1]} vs projection {embed.w.shape}")
    tokens = _prepend_cls(add(matmul(Tensor(patches), embed.w), embed.b), cls_token)
    if tokens.shape[1] != embed.pos.shape[0]:
        raise ShapeError(f"patch_embed: {tokens.shape[1]} tokens vs {embed.pos.shape[0]} positions")
    return add(tokens, embed.pos)


def token_embed_factorized(ids: np.ndarray, embed: EmbedParams, cls_token: Tensor | None) -> Tensor:
    """Lookup at width e_embed, project to d_model, prepend class token, add positions."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"token_embed: expected integer ids of shape (N, L), got {ids.dtype} {ids.shape}")
    vocab = embed.table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token_embed: ids must lie in [0, {vocab})")
    tokens = gather(embed.table, ids)
    if embed.proj is not None:
        tokens = matmul(tokens, embed.proj)
    tokens = _prepend_cls(tokens, cls_token)
    if tokens.shape[1] != embed.pos.shape[0]:
        raise ShapeError(f"token_embed: {tokens.shape[1]} tokens vs {embed.pos.shape[0]} positions")
    return add(tokens, embed.pos)


def head_forward(h: Tensor, head_type: str, w: Tensor, b: Tensor, has_cls_token: bool) -> Tensor:
    """Pool (N, L, d) final-norm output to (N, d) and classify."""
    if head_type == "token-cls":
        if not has_cls_token:
            raise ValueError("head_forward: token-cls head needs a class token")
        pooled = gather(h, (slice(None), 0))
    elif head_type == "gap":
        pooled = reduce_mean(h, axis=1)
    else:
        raise ValueError(f"head_forward: unknown head type {head_type!r}")
    return add(matmul(pooled, w), b)


def embed_batch(batch: np.ndarray, params: ModelParams, cfg: WideNetConfig) -> Tensor:
    if cfg.embed_kind == "patch":
        return patch_embed(batch, params.embed, params.cls_token, cfg.patch_size)
    return token_embed_factorized(batch, params.embed, params.cls_token)


def model_forward(
    batch: np.ndarray,
    params: ModelParams,
    cfg: WideNetConfig,
    rng: RngStream | None = None,
    training: bool = False,
    trace: list | None = None,
) -> tuple[Tensor, list[RoutingOutcome]]:
    """Embed, run ``depth`` blocks with group routing, final norm, head.

    Returns the logits and one routing outcome per group (empty without MoE).
    """
    tokens = embed_batch(batch, params, cfg)
    n, seq_len, d = tokens.shape
    x = reshape(tokens, (n * seq_len, d))
    outcomes: list[RoutingOutcome] = []
    current: RoutingOutcome | None = None
    for j in range(cfg.depth):
        group_start = j % cfg.blocks_per_group == 0
        x, routed = block_forward(
            x, params.blocks[j], params.norms[j], cfg, rng, training, seq_len,
            reuse=None if group_start else current, trace=trace, index=j,
        )  # fmt: skip
        if routed is not None:
            current = routed
            outcomes.append(routed)
    h = layer_norm(x, params.final_gamma, params.final_beta, cfg.ln_eps)
    h = reshape(h, (n, seq_len, d))
    logits = head_forward(h, cfg.head_type, params.head_w, params.head_b, params.cls_token is not None)
    return logits, outcomes
