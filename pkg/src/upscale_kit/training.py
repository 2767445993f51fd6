"""Desk-scale next-token training: sequence packing, weighted corpus
mixing, Adam updates, FFN snapshotting for later MoE expansion, and
per-step loss reporting.

One training run owns its model exclusively; packing and mixing are plain
deterministic generators, so batch order is reproducible per seed.
"""

from __future__ import annotations

import json
import logging
import os
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as tc
from .errors import (ContractError, ParameterError, TokenIdError,
                     TrainingDiverged)
from .model import Model, MoELayer, forward, named_parameters, next_token_loss, save_model
from .surgery import save_ffn_snapshot
from .tensor import Tensor

logger = logging.getLogger("upscale_kit.training")


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class CorpusSource:
    name: str
    docs: Iterable[list[int]]
    weight: float


@dataclass
class PackedBatch:
    rows: np.ndarray            # (batch, ctx_len) token ids
    starts: list[list[int]]     # per row: offsets where a document begins


def pack_sequences(docs: Iterable[list[int]], ctx_len: int, eos_id: int,
                   pad_id: int, batch_size: int = 1,
                   vocab_size: int | None = None) -> Iterator[PackedBatch]:
    """Concatenate documents with eos separators and slice ctx_len rows.

    Documents are never reordered; the final partial row is padded. Row
    `starts` record where each consumed document begins, for masking
    schemes this harness deliberately does not apply.
    """
    if ctx_len < 2:
        raise ParameterError(f"ctx_len must be >= 2, got {ctx_len}")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")

    buf: list[int] = []
    starts: list[int] = []
    rows: list[list[int]] = []
    row_starts: list[list[int]] = []

    def cut_row(length: int) -> None:
        nonlocal buf, starts
        row = buf[:length] + [pad_id] * (ctx_len - length)
        rows.append(row)
        row_starts.append([s for s in starts if s < length])
        buf = buf[ctx_len:]
        starts = [s - ctx_len for s in starts if s >= ctx_len]

    def flush_batch():
        nonlocal rows, row_starts
        batch = PackedBatch(np.asarray(rows, dtype=np.int64), row_starts)
        rows, row_starts = [], []
        return batch

    for doc in docs:
        for t in doc:
            if t < 0 or (vocab_size is not None and t >= vocab_size):
                raise TokenIdError(f"document id {t} out of range")
        starts.append(len(buf))
        buf.extend(doc)
        buf.append(eos_id)
        while len(buf) >= ctx_len:
            cut_row(ctx_len)
            if len(rows) == batch_size:
                yield flush_batch()
    if buf:
        cut_row(len(buf))
    if rows:
        yield flush_batch()


def mix_corpora(sources: Sequence[CorpusSource], seed: int) -> Iterator[list[int]]:
    """Draw documents with probability proportional to source weight.

    Exhausted sources are dropped (with a warning) and the remaining
    weights renormalize implicitly; the draw sequence is fixed per seed.
    """
    live = []
    for s in sources:
        if s.weight < 0:
            raise ParameterError(f"source {s.name!r} has negative weight {s.weight}")
        if s.weight > 0:
            live.append([s.name, iter(s.docs), s.weight])
    if not live:
        raise ParameterError("no source has positive weight")

    rng = random.Random(seed)
    while live:
        total = sum(w for _, _, w in live)
        r = rng.random() * total
        acc = 0.0
        idx = len(live) - 1
        for i, (_, _, w) in enumerate(live):
            acc += w
            if r < acc:
                idx = i
                break
        name, it, _ = live[idx]
        try:
            yield next(it)
        except StopIteration:
            logger.warning("source %r exhausted; renormalizing remaining weights", name)
            del live[idx]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def validate(self) -> "AdamConfig":
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ParameterError(f"{name} must lie in (0, 1), got {b}")
        if self.eps <= 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        return self


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
              state: AdamState, hyper: AdamConfig,
              lr_override: float | None = None) -> AdamState:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    hyper.validate()
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    lr = hyper.lr if lr_override is None else lr_override
    state.step += 1
    c1 = 1.0 - hyper.beta1 ** state.step
    c2 = 1.0 - hyper.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None or g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for param of shape {p.shape}")
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


def warmup_schedule(lr: float, warmup: int = 10) -> Callable[[int], float]:
    """Linear warmup over `warmup` steps, then constant."""
    if warmup < 1:
        return lambda step: lr
    return lambda step: lr * min(1.0, step / warmup)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    losses: list[float]
    seconds: list[float]
    snapshots: list[tuple[int, str]]
    final_checkpoint: str

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train(model: Model, batches, steps: int, lr_schedule, snapshot_every: int,
          out_dir: str | os.PathLike, pad_id: int | None = None,
          adam: AdamConfig | None = None) -> TrainReport:
    """Adam training on next-token loss with periodic FFN snapshots.

    `batches` may be a sequence (cycled as needed) or an iterator that must
    supply at least `steps` batches. `lr_schedule` is a callable step->lr
    or a constant learning rate (which gets the default 10-step warmup).
    On a non-finite loss the run aborts, keeping the last weights that
    produced a finite loss.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if snapshot_every < 0:
        raise ParameterError(f"snapshot_every must be >= 0, got {snapshot_every}")
    has_moe = any(isinstance(l.ffn, MoELayer) for l in model.layers)
    if snapshot_every and has_moe:
        raise ContractError("FFN snapshots are only defined for dense models; "
                            "set snapshot_every=0 for MoE training")
    if not callable(lr_schedule):
        lr_schedule = warmup_schedule(float(lr_schedule))
    if adam is None:
        adam = AdamConfig(lr=0.0)  # lr comes from the schedule
    os.makedirs(out_dir, exist_ok=True)

    if isinstance(batches, (list, tuple)):
        seq = batches

        def batch_iter():
            while True:
                yield from seq
        batch_stream = batch_iter() if seq else iter(())
    else:
        batch_stream = iter(batches)

    names_params = named_parameters(model)
    params = [p for _, p in names_params]
    state = AdamState.for_params(params)
    losses: list[float] = []
    seconds: list[float] = []
    snapshots: list[tuple[int, str]] = []
    last_good = [p.data.copy() for p in params]
    report_path = os.path.join(out_dir, "report.jsonl")

    with open(report_path, "w", encoding="utf-8") as report_file:
        for step in range(1, steps + 1):
            try:
                batch = next(batch_stream)
            except StopIteration:
                raise ParameterError(
                    f"batch stream exhausted at step {step} of {steps}") from None
            t0 = time.perf_counter()
            tc.zero_grads(params)
            # divergence shows up as a non-finite loss, not as fp warnings
            with np.errstate(over="ignore", invalid="ignore"):
                logits = forward(model, batch.rows[:, :-1])
                loss = next_token_loss(logits, batch.rows[:, 1:], pad_id=pad_id)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    rescue = os.path.join(out_dir, "last_good.upsk")
                    for p, good in zip(params, last_good):
                        p.data[...] = good
                    save_model(model, rescue)
                    raise TrainingDiverged(step, rescue)
                for p, good in zip(params, last_good):
                    good[...] = p.data
                tc.backward(loss)
                adam_step(params, None, state, adam, lr_override=lr_schedule(step))
            elapsed = time.perf_counter() - t0
            losses.append(loss_val)
            seconds.append(elapsed)
            report_file.write(json.dumps(
                {"step": step, "loss": loss_val, "seconds": elapsed}) + "\n")
            if snapshot_every and step % snapshot_every == 0:
                snap_path = os.path.join(out_dir, f"ffn-snapshot-{step:06d}.upsk")
                save_ffn_snapshot(model, step, snap_path)
                snapshots.append((step, snap_path))

    final_path = os.path.join(out_dir, "model.upsk")
    save_model(model, final_path)
    return TrainReport(losses, seconds, snapshots, final_path)
