"""Independent oracles and check utilities shared across the test suite.

Everything here is deliberately written against plain numpy (or plain
Python), not against the library's forward/backward machinery, so each
check stays a genuine second route.
"""

from __future__ import annotations

import numpy as np

from upscale_kit import tensor as tc
from upscale_kit.model import MoELayer


# ---------------------------------------------------------------------------
# numeric oracles
# ---------------------------------------------------------------------------

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product, accumulated in float64."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def softmax64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_nll64(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy in nats, computed in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return float(np.mean(lse - picked))


def rope_reference(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Pairwise rotation written out longhand: pair i is (dim i, dim i+h/2)."""
    out = np.array(x, dtype=np.float64, copy=True)
    hd = x.shape[-1]
    half = hd // 2
    for s, pos in enumerate(positions):
        for i in range(half):
            angle = float(pos) * theta ** (-2.0 * i / hd)
            c, sn = np.cos(angle), np.sin(angle)
            x1 = np.array(x[..., s, i], dtype=np.float64)
            x2 = np.array(x[..., s, i + half], dtype=np.float64)
            out[..., s, i] = x1 * c - x2 * sn
            out[..., s, i + half] = x2 * c + x1 * sn
    return out


def reference_attention_layer(layer, x: np.ndarray, cfg) -> np.ndarray:
    """Single-layer forward in plain numpy: pre-norm GQA attention with RoPE
    and causal/window masking, then the gated FFN, with residuals."""
    eps = cfg.norm_eps

    def rms(v, w):
        return v / np.sqrt((v * v).mean(axis=-1, keepdims=True) + eps) * w

    bsz, seq, dim = x.shape
    hd = cfg.head_dim
    groups = cfg.n_heads // cfg.n_kv_heads
    h = rms(x, layer.norm_attn.data)
    q = (h @ layer.wq.data).reshape(bsz, seq, cfg.n_heads, hd).transpose(0, 2, 1, 3)
    k = (h @ layer.wk.data).reshape(bsz, seq, cfg.n_kv_heads, hd).transpose(0, 2, 1, 3)
    v = (h @ layer.wv.data).reshape(bsz, seq, cfg.n_kv_heads, hd).transpose(0, 2, 1, 3)
    positions = np.arange(seq)
    q = rope_reference(q, positions, cfg.rope_theta)
    k = rope_reference(k, positions, cfg.rope_theta)
    k = np.repeat(k, groups, axis=1)
    v = np.repeat(v, groups, axis=1)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    ii, jj = np.indices((seq, seq))
    allowed = jj <= ii
    if cfg.sliding_window is not None:
        allowed &= (ii - jj) < cfg.sliding_window
    scores = np.where(allowed, scores, -np.inf)
    attn = softmax64(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, dim)
    x = x + ctx @ layer.wo.data

    h2 = rms(x, layer.norm_ffn.data)
    ffn = layer.ffn
    gated = h2 @ ffn.gate.data
    sig = 1.0 / (1.0 + np.exp(-gated))
    x = x + ((gated * sig) * (h2 @ ffn.up.data)) @ ffn.down.data
    return x


def moe_token_oracle(moe: MoELayer, x_token: np.ndarray, top_k: int) -> np.ndarray:
    """Brute force for one token: evaluate all experts, then mix the top-k
    (ties to the lower index) with a renormalized softmax in float64."""
    logits = np.asarray(x_token, dtype=np.float64) @ np.asarray(moe.router.data,
                                                                dtype=np.float64)
    order = sorted(range(len(logits)), key=lambda e: (-logits[e], e))
    chosen = order[:top_k]
    w = np.exp(logits[chosen] - logits[chosen].max())
    w = w / w.sum()
    out = np.zeros(x_token.shape[-1], dtype=np.float64)
    for weight, e in zip(w, chosen):
        expert = moe.experts[e]
        gated = x_token @ np.asarray(expert.gate.data, dtype=np.float64)
        sig = 1.0 / (1.0 + np.exp(-gated))
        up = x_token @ np.asarray(expert.up.data, dtype=np.float64)
        out += weight * ((gated * sig * up) @ np.asarray(expert.down.data,
                                                         dtype=np.float64))
    return out


def unrolled_dus_forward(source_model, plan, alpha: float, ids: np.ndarray):
    """Straight-line evaluation of the duplicated-block equation on the
    SOURCE model: out(n,d) = block_n(x + alpha * cached_out(n-1)), with the
    cache always holding the latest duplicate, and no alpha on d == 1."""
    from upscale_kit import model as M

    cfg = source_model.config
    dt = source_model.embed.dtype
    seq = ids.shape[-1]
    cos, sin = M.rope_tables(np.arange(seq), cfg.head_dim, cfg.rope_theta, dt)
    mask = M.attention_mask(seq, cfg.sliding_window, dt)
    x = tc.embedding(source_model.embed, np.atleast_2d(ids))
    cache = {0: x}
    bs = plan.block_size
    for n, d in plan.layout:
        if d >= 2:
            x = tc.add(x, tc.mul(cache[n - 1], np.asarray(alpha, dtype=dt)))
        for li in range((n - 1) * bs, n * bs):
            x = M._layer_forward(source_model.layers[li], x, cfg, cos, sin, mask)
        cache[n] = x
    x = tc.rms_norm(x, source_model.final_norm, cfg.norm_eps)
    w = source_model.embed if source_model.head is None else source_model.head
    return tc.matmul(x, tc.transpose(w, (1, 0))).data


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def fd_gradcheck(loss_fn, params, h: float = 1e-4, rtol: float = 1e-3,
                 max_per_tensor: int | None = None, seed: int = 0) -> float:
    """Central finite differences against the tape's analytic gradients.

    `loss_fn` recomputes the scalar loss from the params' current data; every
    param must be float64. Checks all elements, or a seeded subset of
    `max_per_tensor` per tensor. Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        assert p.dtype == np.float64, "gradient checks run in 64-bit mode"
        p.zero_grad()
    loss = loss_fn()
    tc.backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_per_tensor is not None and n > max_per_tensor:
            idxs = rng.choice(n, size=max_per_tensor, replace=False)
        else:
            idxs = range(n)
        gflat = p.grad.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = gflat[i]
            denom = max(abs(fd), abs(an), 1e-6)
            rel = abs(fd - an) / denom
            worst = max(worst, rel)
            assert rel <= rtol, (
                f"grad mismatch at flat index {i} of shape {p.shape}: "
                f"analytic {an:.8g} vs fd {fd:.8g} (rel {rel:.3g})")
    return worst


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the larger magnitude present."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
