"""Minimal decoder-only transformer: GQA attention with RoPE, RMSNorm,
SiLU-gated FFNs, optional sliding-window masking, optional MoE layers, and
optional skip wiring for block-duplicated models.

A model is immutable during forward; per-call activations live on the tape,
so concurrent forwards on one model are safe. Optimizer steps need
exclusive access.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .config import ModelConfig
from .container import load_container, load_config, save_config, save_container
from .errors import (ContextError, ContractError, TokenIdError,
                     ValidationError)
from .tensor import Tensor

MASK_NEG = -1e30  # large finite negative: softmax weight underflows to exactly 0
INIT_STD = 0.02


@dataclass
class DenseFfn:
    gate: Tensor  # (embed_dim, intermediate_dim)
    up: Tensor    # (embed_dim, intermediate_dim)
    down: Tensor  # (intermediate_dim, embed_dim)


@dataclass
class MoELayer:
    router: Tensor  # (embed_dim, n_experts)
    experts: list[DenseFfn]


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_attn: Tensor
    norm_ffn: Tensor
    ffn: DenseFfn | MoELayer


@dataclass
class WiringEntry:
    """One layer-block position of a depth-up-scaled model.

    `source_position` is the block position whose cached output feeds the
    skip connection (-1 means the embedding output); `alpha_id` indexes the
    model's learnable skip scales and is None exactly when dup_index == 1.
    """
    origin_block: int
    dup_index: int
    alpha_id: int | None
    source_position: int


@dataclass
class SkipWiring:
    block_size: int
    entries: list[WiringEntry]

    def validate(self, n_layers: int, n_alphas: int) -> None:
        if self.block_size * len(self.entries) != n_layers:
            raise ValidationError(
                f"wiring covers {self.block_size * len(self.entries)} layers, "
                f"model has {n_layers}")
        alpha_ids = []
        for pos, e in enumerate(self.entries):
            if (e.dup_index == 1) != (e.alpha_id is None):
                raise ValidationError(
                    f"wiring position {pos}: alpha must be present iff dup_index >= 2")
            if e.alpha_id is not None:
                alpha_ids.append(e.alpha_id)
                if not -1 <= e.source_position < pos:
                    raise ValidationError(
                        f"wiring position {pos}: source {e.source_position} does not "
                        f"precede it")
        if sorted(alpha_ids) != list(range(n_alphas)):
            raise ValidationError(
                f"alpha ids {sorted(alpha_ids)} are not dense over {n_alphas} scalars")


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor                       # (vocab_size, embed_dim)
    layers: list[LayerWeights]
    final_norm: Tensor
    head: Tensor | None                 # (vocab_size, embed_dim); None when tied
    wiring: SkipWiring | None = None
    alphas: list[Tensor] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self)]

    def num_params(self) -> int:
        return sum(t.data.size for _, t in named_parameters(self))

    def forward(self, token_ids, collect_router_stats: bool = False):
        return forward(self, token_ids, collect_router_stats)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Gaussian(0, 0.02) weights, unit norms; bit-reproducible per seed."""
    config.validate()
    rng = np.random.default_rng(seed)

    def w(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, shape).astype(dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    embed = w(config.vocab_size, config.embed_dim)
    layers = []
    for _ in range(config.n_layers):
        wq = w(config.embed_dim, config.embed_dim)
        wk = w(config.embed_dim, config.kv_dim)
        wv = w(config.embed_dim, config.kv_dim)
        wo = w(config.embed_dim, config.embed_dim)
        experts = [DenseFfn(gate=w(config.embed_dim, config.intermediate_dim),
                            up=w(config.embed_dim, config.intermediate_dim),
                            down=w(config.intermediate_dim, config.embed_dim))
                   for _ in range(config.n_experts)]
        if config.n_experts > 1:
            ffn: DenseFfn | MoELayer = MoELayer(
                router=w(config.embed_dim, config.n_experts), experts=experts)
        else:
            ffn = experts[0]
        layers.append(LayerWeights(wq, wk, wv, wo,
                                   norm_attn=ones(config.embed_dim),
                                   norm_ffn=ones(config.embed_dim),
                                   ffn=ffn))
    final_norm = ones(config.embed_dim)
    head = None if config.tie_embeddings else w(config.vocab_size, config.embed_dim)
    return Model(config, embed, layers, final_norm, head)


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable-parameter count; equals tensor enumeration."""
    config.validate()
    d, i = config.embed_dim, config.intermediate_dim
    attn = d * d + 2 * d * config.kv_dim + d * d
    ffn = 3 * d * i * config.n_experts
    router = d * config.n_experts if config.n_experts > 1 else 0
    per_layer = attn + ffn + router + 2 * d
    total = config.vocab_size * d + config.n_layers * per_layer + d
    if not config.tie_embeddings:
        total += config.vocab_size * d
    return total


def named_parameters(model: Model) -> list[tuple[str, Tensor]]:
    """Canonical (name, tensor) list; the order is the save/update order."""
    out: list[tuple[str, Tensor]] = [("embed.weight", model.embed)]
    for i, layer in enumerate(model.layers):
        out += [(f"layer.{i}.attn.q", layer.wq), (f"layer.{i}.attn.k", layer.wk),
                (f"layer.{i}.attn.v", layer.wv), (f"layer.{i}.attn.o", layer.wo)]
        out += [(f"layer.{i}.norm.attn", layer.norm_attn),
                (f"layer.{i}.norm.ffn", layer.norm_ffn)]
        experts = layer.ffn.experts if isinstance(layer.ffn, MoELayer) else [layer.ffn]
        for e, expert in enumerate(experts):
            out += [(f"layer.{i}.ffn.{e}.gate", expert.gate),
                    (f"layer.{i}.ffn.{e}.up", expert.up),
                    (f"layer.{i}.ffn.{e}.down", expert.down)]
        if isinstance(layer.ffn, MoELayer):
            out.append((f"layer.{i}.router", layer.ffn.router))
    out.append(("final_norm", model.final_norm))
    if model.head is not None:
        out.append(("head", model.head))
    for j, alpha in enumerate(model.alphas):
        out.append((f"alpha.{j}", alpha))
    return out


def _cp(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=True)


def clone_layer(layer: LayerWeights) -> LayerWeights:
    ffn = layer.ffn
    if isinstance(ffn, MoELayer):
        ffn = MoELayer(_cp(ffn.router),
                       [DenseFfn(_cp(e.gate), _cp(e.up), _cp(e.down)) for e in ffn.experts])
    else:
        ffn = DenseFfn(_cp(ffn.gate), _cp(ffn.up), _cp(ffn.down))
    return LayerWeights(_cp(layer.wq), _cp(layer.wk), _cp(layer.wv), _cp(layer.wo),
                        _cp(layer.norm_attn), _cp(layer.norm_ffn), ffn)


def clone_model(model: Model) -> Model:
    """Deep copy with fresh gradient buffers (surgery never aliases weights)."""
    cp = _cp
    layers = [clone_layer(l) for l in model.layers]
    wiring = None
    if model.wiring is not None:
        wiring = SkipWiring(model.wiring.block_size,
                            [WiringEntry(e.origin_block, e.dup_index, e.alpha_id,
                                         e.source_position) for e in model.wiring.entries])
    return Model(model.config.replace(), cp(model.embed), layers, cp(model.final_norm),
                 None if model.head is None else cp(model.head),
                 wiring, [cp(a) for a in model.alphas])


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------

def rope_tables(positions: np.ndarray, head_dim: int, theta: float, dtype):
    """cos/sin tables of shape (len(positions), head_dim), pairs split in halves."""
    if head_dim % 2 != 0:
        raise ValidationError(f"head_dim must be even for RoPE, got {head_dim}")
    if theta <= 0:
        raise ValidationError(f"rope theta must be positive, got {theta}")
    positions = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    inv_freq = theta ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles)] * 2, axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(angles)] * 2, axis=-1).astype(dtype)
    return cos, sin


def apply_rope(x: Tensor, positions: np.ndarray, theta: float) -> Tensor:
    """Rotate (..., seq, head_dim) features by their positions' angles."""
    cos, sin = rope_tables(positions, x.shape[-1], theta, x.dtype)
    return tc.add(tc.mul(x, cos), tc.mul(tc.rotate_half(x), sin))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def attention_mask(seq_len: int, sliding_window: int | None, dtype) -> np.ndarray:
    ii = np.arange(seq_len)[:, None]
    jj = np.arange(seq_len)[None, :]
    allowed = jj <= ii
    if sliding_window is not None:
        allowed &= (ii - jj) < sliding_window
    return np.where(allowed, 0.0, MASK_NEG).astype(dtype)


def _dense_ffn(ffn: DenseFfn, h: Tensor) -> Tensor:
    return tc.matmul(tc.mul(tc.silu(tc.matmul(h, ffn.gate)), tc.matmul(h, ffn.up)),
                     ffn.down)


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean top-k mask along the last axis; ties pick the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def _moe_ffn(moe: MoELayer, h: Tensor, top_k: int):
    """Top-K routing with renormalized softmax mixing.

    Every expert is evaluated densely (desk scale); non-selected experts get
    an exact-zero weight, so their outputs and gradients vanish.
    """
    logits = tc.matmul(h, moe.router)
    mask = topk_mask(logits.data, top_k)
    penalty = ((~mask) * MASK_NEG).astype(h.dtype)
    weights = tc.softmax(tc.add(logits, penalty))
    out = None
    for e, expert in enumerate(moe.experts):
        term = tc.mul(_dense_ffn(expert, h), tc.narrow(weights, -1, e, 1))
        out = term if out is None else tc.add(out, term)
    counts = mask.reshape(-1, mask.shape[-1]).sum(axis=0)
    return out, counts


def _layer_forward(layer: LayerWeights, x: Tensor, cfg: ModelConfig,
                   cos: np.ndarray, sin: np.ndarray, mask: np.ndarray,
                   stats: dict | None = None, layer_index: int = -1) -> Tensor:
    bsz, seq, _ = x.shape
    hd = cfg.head_dim
    groups = cfg.n_heads // cfg.n_kv_heads

    h = tc.rms_norm(x, layer.norm_attn, cfg.norm_eps)
    q = tc.transpose(tc.reshape(tc.matmul(h, layer.wq),
                                (bsz, seq, cfg.n_heads, hd)), (0, 2, 1, 3))
    k = tc.transpose(tc.reshape(tc.matmul(h, layer.wk),
                                (bsz, seq, cfg.n_kv_heads, hd)), (0, 2, 1, 3))
    v = tc.transpose(tc.reshape(tc.matmul(h, layer.wv),
                                (bsz, seq, cfg.n_kv_heads, hd)), (0, 2, 1, 3))
    q = tc.add(tc.mul(q, cos), tc.mul(tc.rotate_half(q), sin))
    k = tc.add(tc.mul(k, cos), tc.mul(tc.rotate_half(k), sin))
    if groups > 1:
        k = tc.repeat_interleave(k, groups, axis=1)
        v = tc.repeat_interleave(v, groups, axis=1)
    scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))),
                    np.asarray(1.0 / np.sqrt(hd), dtype=x.dtype))
    attn = tc.softmax(tc.add(scores, mask))
    ctx = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)),
                     (bsz, seq, cfg.embed_dim))
    x = tc.add(x, tc.matmul(ctx, layer.wo))

    h2 = tc.rms_norm(x, layer.norm_ffn, cfg.norm_eps)
    if isinstance(layer.ffn, MoELayer):
        ffn_out, counts = _moe_ffn(layer.ffn, h2, cfg.top_k)
        if stats is not None:
            stats[layer_index] = stats.get(layer_index, 0) + counts
    else:
        ffn_out = _dense_ffn(layer.ffn, h2)
    return tc.add(x, ffn_out)


def forward(model: Model, token_ids, collect_router_stats: bool = False):
    """Logits (batch, seq, vocab); optionally also per-layer expert counts."""
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ContractError(f"token_ids must be 1-D or 2-D, got shape {ids.shape}")
    bsz, seq = ids.shape
    if seq > cfg.ctx_len:
        raise ContextError(f"sequence length {seq} exceeds ctx_len {cfg.ctx_len}")
    if seq == 0:
        raise ContractError("empty sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise TokenIdError(f"token id out of range [0, {cfg.vocab_size})")

    dtype = model.embed.dtype
    cos, sin = rope_tables(np.arange(seq), cfg.head_dim, cfg.rope_theta, dtype)
    mask = attention_mask(seq, cfg.sliding_window, dtype)
    stats: dict[int, np.ndarray] = {}
    stat_arg = stats if collect_router_stats else None

    x = tc.embedding(model.embed, ids)
    if model.wiring is None:
        for i, layer in enumerate(model.layers):
            x = _layer_forward(layer, x, cfg, cos, sin, mask, stat_arg, i)
    else:
        bs = model.wiring.block_size
        cache: dict[int, Tensor] = {0: x}
        for pos, entry in enumerate(model.wiring.entries):
            if entry.alpha_id is not None:
                skip = cache[entry.origin_block - 1]
                x = tc.add(x, tc.mul(skip, model.alphas[entry.alpha_id]))
            for li in range(pos * bs, (pos + 1) * bs):
                x = _layer_forward(model.layers[li], x, cfg, cos, sin, mask,
                                   stat_arg, li)
            cache[entry.origin_block] = x

    x = tc.rms_norm(x, model.final_norm, cfg.norm_eps)
    out_weight = model.embed if model.head is None else model.head
    logits = tc.matmul(x, tc.transpose(out_weight, (1, 0)))
    if collect_router_stats:
        return logits, {i: c for i, c in sorted(stats.items())}
    return logits


def next_token_loss(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean cross-entropy (nats) over non-padding positions.

    The caller shifts targets by one position; `pad_id` rows are excluded.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(
            f"logits {logits.shape} and targets {targets.shape} do not align")
    flat = tc.reshape(logits, (-1, logits.shape[-1]))
    return tc.cross_entropy(flat, targets.reshape(-1), ignore_id=pad_id)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def sidecar_paths(path: str | os.PathLike) -> tuple[str, str]:
    base = os.fspath(path)
    if base.endswith(".upsk"):
        base = base[:-5]
    return base + ".config.json", base + ".wiring.json"


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Write the weight container plus config (and wiring, if any) sidecars."""
    save_container({name: t.data for name, t in named_parameters(model)}, path)
    config_path, wiring_path = sidecar_paths(path)
    save_config(model.config, config_path)
    if model.wiring is not None:
        doc = {"block_size": model.wiring.block_size,
               "entries": [{"origin_block": e.origin_block,
                            "dup_index": e.dup_index,
                            "alpha_id": e.alpha_id,
                            "source_position": e.source_position}
                           for e in model.wiring.entries]}
        with open(wiring_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    elif os.path.exists(wiring_path):
        os.unlink(wiring_path)


def load_model(path: str | os.PathLike) -> Model:
    config_path, wiring_path = sidecar_paths(path)
    config = load_config(config_path)
    tensors = load_container(path)

    def take(name, shape) -> Tensor:
        if name not in tensors:
            raise ValidationError(f"{path}: missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != tuple(shape):
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {tuple(shape)}")
        return Tensor(arr, requires_grad=True)

    d, i, v = config.embed_dim, config.intermediate_dim, config.vocab_size
    embed = take("embed.weight", (v, d))
    layers = []
    for li in range(config.n_layers):
        wq = take(f"layer.{li}.attn.q", (d, d))
        wk = take(f"layer.{li}.attn.k", (d, config.kv_dim))
        wv = take(f"layer.{li}.attn.v", (d, config.kv_dim))
        wo = take(f"layer.{li}.attn.o", (d, d))
        norm_attn = take(f"layer.{li}.norm.attn", (d,))
        norm_ffn = take(f"layer.{li}.norm.ffn", (d,))
        experts = [DenseFfn(take(f"layer.{li}.ffn.{e}.gate", (d, i)),
                            take(f"layer.{li}.ffn.{e}.up", (d, i)),
                            take(f"layer.{li}.ffn.{e}.down", (i, d)))
                   for e in range(config.n_experts)]
        if config.n_experts > 1:
            ffn: DenseFfn | MoELayer = MoELayer(
                take(f"layer.{li}.router", (d, config.n_experts)), experts)
        else:
            ffn = experts[0]
        layers.append(LayerWeights(wq, wk, wv, wo, norm_attn, norm_ffn, ffn))
    final_norm = take("final_norm", (d,))
    head = None if config.tie_embeddings else take("head", (v, d))

    alphas = []
    while f"alpha.{len(alphas)}" in tensors:
        alphas.append(take(f"alpha.{len(alphas)}", ()))
    if tensors:
        raise ValidationError(f"{path}: unexpected tensors {sorted(tensors)}")

    wiring = None
    if os.path.exists(wiring_path):
        with open(wiring_path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        wiring = SkipWiring(int(doc["block_size"]),
                            [WiringEntry(e["origin_block"], e["dup_index"],
                                         e["alpha_id"], e["source_position"])
                             for e in doc["entries"]])
        wiring.validate(config.n_layers, len(alphas))
    elif alphas:
        raise ValidationError(f"{path}: alpha tensors present but no wiring sidecar")
    return Model(config, embed, layers, final_norm, head, wiring, alphas)
