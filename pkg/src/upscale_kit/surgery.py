"""Model up-scaling transforms: embedding merge after vocabulary extension,
depth-up-scaling (plain span concatenation and block-level duplication with
skip connections), snapshot-initialized MoE expansion, and the config
rewrite that drops the sliding window and raises the RoPE base.

All transforms are pure model-to-model functions: the input model is never
mutated and output weights never alias input weights.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .container import load_container, save_container
from .errors import ContractError, ParameterError, ValidationError
from .model import (DenseFfn, Model, MoELayer, SkipWiring, WiringEntry,
                    clone_layer, clone_model, forward)
from .tensor import Tensor, no_grad

INIT_STD = 0.02


# ---------------------------------------------------------------------------
# block plans
# ---------------------------------------------------------------------------

@dataclass
class BlockPlan:
    """Which fixed-size layer blocks get duplicated, and how often."""
    block_size: int
    usage: list[int]

    @property
    def n_blocks(self) -> int:
        return len(self.usage)

    @property
    def source_depth(self) -> int:
        return self.block_size * len(self.usage)

    @property
    def result_depth(self) -> int:
        return self.block_size * sum(self.usage)

    @property
    def layout(self) -> list[tuple[int, int]]:
        """(origin_block, dup_index) per resulting block position, 1-indexed."""
        return [(n, d) for n in range(1, len(self.usage) + 1)
                for d in range(1, self.usage[n - 1] + 1)]

    def is_identity(self) -> bool:
        return all(u == 1 for u in self.usage)

    def to_dict(self) -> dict:
        return {"block_size": self.block_size, "usage": list(self.usage)}


def make_plan(n_layers: int, block_size: int, usage: list[int]) -> BlockPlan:
    if block_size < 1:
        raise ValidationError(f"block_size must be >= 1, got {block_size}")
    if n_layers < 1 or n_layers % block_size != 0:
        raise ValidationError(
            f"n_layers {n_layers} is not divisible by block_size {block_size}")
    if len(usage) != n_layers // block_size:
        raise ValidationError(
            f"usage has {len(usage)} entries, expected {n_layers // block_size} blocks")
    if any(u < 1 for u in usage):
        raise ValidationError(f"usage counts must be >= 1, got {usage}")
    return BlockPlan(block_size, list(usage))


def save_plan(plan: BlockPlan, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(plan.to_dict(), f, indent=2)
        f.write("\n")


def load_plan(path: str | os.PathLike) -> BlockPlan:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed plan JSON ({exc})") from exc
    try:
        block_size = int(doc["block_size"])
        usage = [int(u) for u in doc["usage"]]
    except (TypeError, KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: plan needs block_size and usage") from exc
    return make_plan(block_size * len(usage), block_size, usage)


# ---------------------------------------------------------------------------
# depth up-scaling
# ---------------------------------------------------------------------------

def _require_unwired(m: Model, op: str) -> None:
    if m.wiring is not None:
        raise ContractError(f"{op} expects a model without existing skip wiring")


def dus_v1(m: Model, k: int) -> Model:
    """Stack the first K and the last K layers: depth 2K, no skip wiring."""
    n = m.config.n_layers
    if not 1 <= k <= n:
        raise ParameterError(f"K must lie in [1, {n}], got {k}")
    _require_unwired(m, "dus_v1")
    out = clone_model(m)
    out.layers = out.layers[:k] + [clone_layer(l) for l in m.layers[n - k:]]
    out.config = m.config.replace(n_layers=2 * k)
    return out


def dus_v2(m: Model, plan: BlockPlan, alpha_init: float = 1.0) -> Model:
    """Duplicate blocks per plan; d>=2 instances get a skip connection from
    the latest duplicate of the previous origin block, scaled by a fresh
    learnable alpha (the first instance of every block has no alpha)."""
    if plan.source_depth != m.config.n_layers:
        raise ContractError(
            f"plan covers {plan.source_depth} layers, model has {m.config.n_layers}")
    _require_unwired(m, "dus_v2")
    if plan.is_identity():
        return clone_model(m)

    bs = plan.block_size
    dtype = m.embed.dtype
    layers = []
    entries = []
    alphas: list[Tensor] = []
    last_pos: dict[int, int] = {}
    for pos, (n, d) in enumerate(plan.layout):
        layers.extend(clone_layer(l) for l in m.layers[(n - 1) * bs: n * bs])
        alpha_id = None
        if d >= 2:
            alpha_id = len(alphas)
            alphas.append(Tensor(np.asarray(alpha_init, dtype=dtype), requires_grad=True))
        entries.append(WiringEntry(origin_block=n, dup_index=d, alpha_id=alpha_id,
                                   source_position=last_pos.get(n - 1, -1)))
        last_pos[n] = pos

    def cp(t):
        return Tensor(t.data.copy(), requires_grad=True)

    out = Model(config=m.config.replace(n_layers=plan.result_depth),
                embed=cp(m.embed), layers=layers, final_norm=cp(m.final_norm),
                head=None if m.head is None else cp(m.head),
                wiring=SkipWiring(bs, entries), alphas=alphas)
    out.wiring.validate(out.config.n_layers, len(alphas))
    return out


# ---------------------------------------------------------------------------
# embedding merge
# ---------------------------------------------------------------------------

def merge_token_embeddings(m: Model, base, extended, fallback_seed: int = 0) -> Model:
    """Grow the embedding (and untied head) to the extended vocabulary.

    Rows below the base size are copied unchanged; every new row is the
    arithmetic mean of the base rows its token decomposes into. Tokens with
    an empty decomposition (only possible without byte fallback) are drawn
    from a Gaussian fitted per dimension to the base matrix.
    """
    if m.config.vocab_size != base.vocab_size:
        raise ContractError(
            f"model vocab {m.config.vocab_size} != base tokenizer vocab {base.vocab_size}")
    if extended.base_size != base.vocab_size:
        raise ContractError(
            f"extended tokenizer base_size {extended.base_size} does not match the "
            f"base tokenizer vocab {base.vocab_size}")

    out = clone_model(m)
    if extended.vocab_size == base.vocab_size:
        return out

    decompositions = [extended.decompose(t)
                      for t in range(extended.base_size, extended.vocab_size)]
    rng = np.random.default_rng(fallback_seed)
    out.embed = Tensor(_grow_rows(m.embed.data, decompositions, rng), requires_grad=True)
    if out.head is not None:
        out.head = Tensor(_grow_rows(m.head.data, decompositions, rng),
                          requires_grad=True)
    out.config = out.config.replace(vocab_size=extended.vocab_size)
    return out


def _grow_rows(matrix: np.ndarray, decompositions: list[list[int]],
               rng: np.random.Generator) -> np.ndarray:
    base_rows, dim = matrix.shape
    grown = np.empty((base_rows + len(decompositions), dim), dtype=matrix.dtype)
    grown[:base_rows] = matrix
    mean = matrix.mean(axis=0, dtype=np.float64)
    std = matrix.std(axis=0, dtype=np.float64)
    for j, ids in enumerate(decompositions):
        if ids:
            grown[base_rows + j] = matrix[np.asarray(ids)].mean(axis=0, dtype=np.float64)
        else:
            grown[base_rows + j] = rng.normal(mean, std)
    return grown


# ---------------------------------------------------------------------------
# mixture-of-experts expansion
# ---------------------------------------------------------------------------

@dataclass
class FfnSnapshot:
    """Dense FFN weights of every layer, captured at one training step."""
    step: int
    layers: list[dict[str, np.ndarray]]  # per layer: {"gate","up","down"}


def save_ffn_snapshot(model: Model, step: int, path: str | os.PathLike) -> None:
    tensors = {"meta.step": np.asarray([step], dtype=np.float64)}
    for i, layer in enumerate(model.layers):
        if isinstance(layer.ffn, MoELayer):
            raise ContractError("FFN snapshots are defined for dense models only")
        tensors[f"layer.{i}.ffn.0.gate"] = layer.ffn.gate.data
        tensors[f"layer.{i}.ffn.0.up"] = layer.ffn.up.data
        tensors[f"layer.{i}.ffn.0.down"] = layer.ffn.down.data
    save_container(tensors, path)


def load_ffn_snapshot(path: str | os.PathLike) -> FfnSnapshot:
    tensors = load_container(path)
    if "meta.step" not in tensors:
        raise ValidationError(f"{path}: snapshot lacks a meta.step tensor")
    step = int(tensors.pop("meta.step")[0])
    layers = []
    while f"layer.{len(layers)}.ffn.0.gate" in tensors:
        i = len(layers)
        layers.append({name: tensors.pop(f"layer.{i}.ffn.0.{name}")
                       for name in ("gate", "up", "down")})
    if tensors:
        raise ValidationError(f"{path}: unexpected tensors {sorted(tensors)}")
    return FfnSnapshot(step, layers)


def expand_moe(m: Model, snapshots: list[FfnSnapshot], n_experts: int,
               top_k: int, seed: int = 0) -> Model:
    """Turn every dense FFN into an MoE layer.

    Expert 0 keeps the model's current FFN weights; experts 1..M-1 take the
    snapshots in ascending step order. The router starts from small Gaussian
    noise so the top-K tie rule does not pin routing to experts {0, 1}.
    """
    if any(isinstance(layer.ffn, MoELayer) for layer in m.layers):
        raise ContractError("expand_moe expects dense FFNs")
    if len(snapshots) != n_experts - 1:
        raise ParameterError(
            f"need experts-1 = {n_experts - 1} snapshots, got {len(snapshots)}")
    if not 1 <= top_k <= n_experts:
        raise ParameterError(f"top_k must lie in [1, {n_experts}], got {top_k}")

    out = clone_model(m)
    out.config = out.config.replace(n_experts=n_experts, top_k=top_k)
    if n_experts == 1:
        return out

    dtype = m.embed.dtype
    ordered = sorted(snapshots, key=lambda s: s.step)
    for snap in ordered:
        if len(snap.layers) != len(m.layers):
            raise ContractError(
                f"snapshot at step {snap.step} has {len(snap.layers)} layers, "
                f"model has {len(m.layers)}")
    rng = np.random.default_rng(seed)
    for i, layer in enumerate(out.layers):
        dense: DenseFfn = layer.ffn
        experts = [dense]
        for snap in ordered:
            weights = snap.layers[i]
            expert = DenseFfn(*(Tensor(np.asarray(weights[k], dtype=dtype).copy(),
                                       requires_grad=True)
                                for k in ("gate", "up", "down")))
            for name in ("gate", "up", "down"):
                if getattr(expert, name).shape != getattr(dense, name).shape:
                    raise ContractError(
                        f"snapshot step {snap.step}, layer {i}: {name} shape "
                        f"{getattr(expert, name).shape} != {getattr(dense, name).shape}")
            experts.append(expert)
        router = Tensor(rng.normal(0.0, INIT_STD,
                                   (m.config.embed_dim, n_experts)).astype(dtype),
                        requires_grad=True)
        layer.ffn = MoELayer(router, experts)
    return out


# ---------------------------------------------------------------------------
# config rewrite and routing diagnostics
# ---------------------------------------------------------------------------

def retheta_and_unwindow(config: ModelConfig, new_theta: float) -> ModelConfig:
    """Drop the sliding window and raise the RoPE base; idempotent."""
    if not new_theta > 0:
        raise ParameterError(f"theta must be positive, got {new_theta}")
    return config.replace(sliding_window=None, rope_theta=new_theta)


def router_load(m: Model, token_batch) -> dict[int, np.ndarray]:
    """Per-layer fraction of tokens selecting each expert among their top-K.

    Fractions per layer sum to top_k. Raises on dense models.
    """
    if not any(isinstance(layer.ffn, MoELayer) for layer in m.layers):
        raise ContractError("router_load expects a model with MoE layers")
    ids = np.asarray(token_batch)
    if ids.ndim == 1:
        ids = ids[None, :]
    with no_grad():
        _, stats = forward(m, ids, collect_router_stats=True)
    n_tokens = ids.size
    return {layer: counts / n_tokens for layer, counts in stats.items()}


def surgery_report(operation: str, before: Model, after: Model, **extra) -> dict:
    """JSON-ready summary written next to output checkpoints."""
    report = {
        "operation": operation,
        "depth_before": before.config.n_layers,
        "depth_after": after.config.n_layers,
        "alpha_count": len(after.alphas),
        "params_before": before.num_params(),
        "params_after": after.num_params(),
        "param_delta": after.num_params() - before.num_params(),
    }
    report.update(extra)
    return report
