"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete. Tolerances are pinned here and nowhere else.
"""

import functools
import json
import os
from collections import Counter

import numpy as np
import pytest

from conftest import DATA_DIR, tiny_config
from helpers import (fd_gradcheck, moe_token_oracle, rel_err,
                     unrolled_dus_forward)
from upscale_kit import cli
from upscale_kit import tensor as tc
from upscale_kit.container import (load_config, load_container, save_config,
                                   save_container)
from upscale_kit.errors import HeaderError, OverlapError, TruncationError
from upscale_kit.model import (DenseFfn, MoELayer, apply_rope, build_model,
                               forward, load_model, named_parameters,
                               next_token_loss, param_count, save_model)
from upscale_kit.surgery import (FfnSnapshot, dus_v2, expand_moe, make_plan,
                                 merge_token_embeddings, retheta_and_unwindow,
                                 router_load)
from upscale_kit.tensor import Tensor
from upscale_kit.tokenizer import (Tokenizer, extend_vocab,
                                   tokens_per_character, train_bpe)
from upscale_kit.training import CorpusSource, mix_corpora, pack_sequences

PHI3_COLUMN = tiny_config(vocab_size=32064, embed_dim=5120,
                          intermediate_dim=17920, n_layers=40, n_heads=40,
                          n_kv_heads=10, n_experts=1, top_k=1, rope_theta=1e4,
                          sliding_window=2047)
JAI_COLUMN = tiny_config(vocab_size=64000, embed_dim=5120,
                         intermediate_dim=17920, n_layers=64, n_heads=40,
                         n_kv_heads=10, n_experts=4, top_k=2, rope_theta=1e6,
                         sliding_window=None)
TABLE2_USAGE = [1, 1, 1, 2, 3, 3, 2, 1, 1, 1]


def criterion(num: int, description: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                out = fn(*args, **kwargs)
            except BaseException:
                print(f"[acceptance] criterion {num:2d} FAIL  {description}")
                raise
            print(f"[acceptance] criterion {num:2d} PASS  {description}")
            return out
        return wrapper
    return deco


@criterion(1, "parameter counts reproduce the published 14.0B / 75.3B columns")
def test_01_param_count_reproduction():
    assert abs(param_count(PHI3_COLUMN) - 14.0e9) / 14.0e9 < 0.015
    assert abs(param_count(JAI_COLUMN) - 75.3e9) / 75.3e9 < 0.015

    rng = np.random.default_rng(0)
    for _ in range(200):
        n_heads = int(rng.integers(1, 5))
        kv = int(rng.choice([g for g in range(1, n_heads + 1) if n_heads % g == 0]))
        experts = int(rng.integers(1, 5))
        cfg = tiny_config(vocab_size=int(rng.integers(4, 64)),
                          embed_dim=int(n_heads * 2 * rng.integers(1, 4)),
                          intermediate_dim=int(rng.integers(2, 24)),
                          n_layers=int(rng.integers(1, 5)),
                          n_heads=n_heads, n_kv_heads=kv, n_experts=experts,
                          top_k=int(rng.integers(1, experts + 1)),
                          tie_embeddings=bool(rng.random() < 0.5))
        assert build_model(cfg, seed=1).num_params() == param_count(cfg)


@criterion(2, "block plan turns 40 layers into exactly 64; all-ones plan is identity")
def test_02_dus_plan_reproduction():
    plan = make_plan(40, 4, TABLE2_USAGE)
    assert plan.result_depth == 64
    expected_layout = [(n, d) for n in range(1, 11)
                       for d in range(1, TABLE2_USAGE[n - 1] + 1)]
    assert plan.layout == expected_layout

    cfg = tiny_config(embed_dim=8, intermediate_dim=8, n_layers=40, n_heads=2,
                      n_kv_heads=1, vocab_size=32)
    m = build_model(cfg, seed=2)
    scaled = dus_v2(m, plan, alpha_init=1.0)
    assert scaled.config.n_layers == 64
    assert len(scaled.layers) == 64
    for pos, (n, d) in enumerate(plan.layout):
        for off in range(4):
            assert np.array_equal(scaled.layers[pos * 4 + off].wq.data,
                                  m.layers[(n - 1) * 4 + off].wq.data)

    identity = dus_v2(m, make_plan(40, 4, [1] * 10))
    assert identity.wiring is None and identity.alphas == []
    names_a = named_parameters(m)
    names_b = named_parameters(identity)
    assert [n for n, _ in names_a] == [n for n, _ in names_b]
    for (_, ta), (_, tb) in zip(names_a, names_b):
        assert np.array_equal(ta.data, tb.data)


@criterion(3, "duplicated-block forward matches the unrolled skip-equation oracle")
def test_03_skip_equation_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_heads = int(rng.choice([2, 4]))
        kv = int(rng.choice([g for g in (1, 2, 4) if g <= n_heads and n_heads % g == 0]))
        n_layers = int(rng.choice([2, 4, 6, 8]))
        block_size = int(rng.choice([b for b in (1, 2, 4) if n_layers % b == 0]))
        usage = [int(u) for u in rng.integers(1, 4, size=n_layers // block_size)]
        cfg = tiny_config(vocab_size=32,
                          embed_dim=int(n_heads * 2 * rng.integers(1, 1 + 32 // (2 * n_heads))),
                          intermediate_dim=int(rng.integers(4, 24)),
                          n_layers=n_layers, n_heads=n_heads, n_kv_heads=kv)
        m = build_model(cfg, seed=seed)
        plan = make_plan(n_layers, block_size, usage)
        ids = rng.integers(0, cfg.vocab_size, (1, 5))
        for alpha in (0.0, 0.5, 1.0):
            scaled = dus_v2(m, plan, alpha_init=alpha)
            got = forward(scaled, ids).data
            want = unrolled_dus_forward(m, plan, alpha, ids)
            assert rel_err(got, want) < 1e-6, (seed, alpha, usage)


@criterion(4, "MoE reproduces dense logits, matches the all-experts oracle, routes evenly")
def test_04_moe_symmetry_and_oracle(rng):
    # expert symmetry: identical snapshots reproduce the dense model
    cfg = tiny_config(n_layers=2)
    m = build_model(cfg, seed=3)
    snaps = [FfnSnapshot(step=s, layers=[
        {k: getattr(l.ffn, k).data.copy() for k in ("gate", "up", "down")}
        for l in m.layers]) for s in (10, 20, 30)]
    moe = expand_moe(m, snaps, 4, 2, seed=4)
    ids = rng.integers(0, cfg.vocab_size, (4, 16))
    assert rel_err(forward(moe, ids).data, forward(m, ids).data) < 1e-5

    # brute-force all-experts top-2-softmax oracle, token by token
    from upscale_kit.model import _moe_ffn
    cfg64 = tiny_config(n_layers=1, n_experts=4, top_k=2)
    m64 = build_model(cfg64, seed=5, dtype=np.float64)
    layer_moe: MoELayer = m64.layers[0].ffn
    x = rng.normal(size=(1, 24, cfg64.embed_dim))
    out, _ = _moe_ffn(layer_moe, Tensor(x, dtype=np.float64), 2)
    for t in range(24):
        assert rel_err(out.data[0, t], moe_token_oracle(layer_moe, x[0, t], 2)) < 1e-6

    # selection frequencies: sum exactly K, each expert within [0.3, 0.7]
    big_cfg = tiny_config(vocab_size=256, embed_dim=32, intermediate_dim=48,
                          n_layers=2, n_experts=4, top_k=2, ctx_len=128)
    big = build_model(big_cfg, seed=6)
    tokens = rng.integers(0, 256, (96, 128))  # 12288 tokens
    fractions = router_load(big, tokens)
    for frac in fractions.values():
        assert frac.sum() == pytest.approx(2.0, abs=0)
        assert (frac >= 0.3).all() and (frac <= 0.7).all()


@criterion(5, "merged embeddings average origin rows exactly and preserve base rows")
def test_05_embedding_merge(thai_text):
    base = train_bpe("plain english text for the base vocabulary", 15)
    ext = extend_vocab(base, thai_text, base.vocab_size + 30)
    cfg = tiny_config(vocab_size=base.vocab_size)
    m = build_model(cfg, seed=7)
    merged = merge_token_embeddings(m, base, ext, fallback_seed=8)

    assert np.array_equal(merged.embed.data[:base.vocab_size], m.embed.data)
    assert np.array_equal(merged.head.data[:base.vocab_size], m.head.data)
    for t in range(ext.base_size, ext.vocab_size):
        ids = np.asarray(ext.decompose(t))
        want = m.embed.data[ids].astype(np.float64).mean(axis=0)
        assert np.abs(merged.embed.data[t] - want).max() < 1e-7
        want_head = m.head.data[ids].astype(np.float64).mean(axis=0)
        assert np.abs(merged.head.data[t] - want_head).max() < 1e-7

    ext0 = extend_vocab(base, thai_text, base.vocab_size)
    same = merge_token_embeddings(m, base, ext0)
    for (_, ta), (_, tb) in zip(named_parameters(m), named_parameters(same)):
        assert np.array_equal(ta.data, tb.data)


@criterion(6, "tokenizer round trips exactly; extension strictly improves Thai TPC")
def test_06_tokenizer_properties(thai_text):
    base = train_bpe("plain english text, nothing but english text", 25)
    rng = np.random.default_rng(9)
    for _ in range(1000):
        raw = rng.integers(0, 256, size=rng.integers(0, 80)).astype(np.uint8).tobytes()
        assert base.decode_bytes(base.encode(raw)) == raw
    assert base.decode(base.encode(thai_text)) == thai_text

    ext = extend_vocab(base, thai_text, base.vocab_size + 80)
    assert ext.decode(ext.encode(thai_text)) == thai_text
    assert tokens_per_character(ext, thai_text).tpc < \
        tokens_per_character(base, thai_text).tpc
    for corpus in ("unrelated english words", thai_text, "mixed ไทย english"):
        assert len(ext.encode(corpus)) <= len(base.encode(corpus))

    byte_tok = Tokenizer.byte_tokenizer()
    assert tokens_per_character(byte_tok, "pure ascii corpus!").tpc == 1.0


@criterion(7, "all trainable tensors (alphas and router included) pass 64-bit FD checks")
def test_07_gradient_integrity():
    cfg = tiny_config(vocab_size=13, embed_dim=8, intermediate_dim=10,
                      n_layers=2, n_heads=2, n_kv_heads=1, ctx_len=8,
                      sliding_window=3)
    source = build_model(cfg, seed=10, dtype=np.float64)
    wired = dus_v2(source, make_plan(2, 1, [1, 2]), alpha_init=0.8)

    rng = np.random.default_rng(11)
    snaps = []
    for step in (5, 10):
        layers = []
        for l in wired.layers:
            layers.append({k: getattr(l.ffn, k).data +
                           0.05 * rng.normal(size=getattr(l.ffn, k).shape)
                           for k in ("gate", "up", "down")})
        snaps.append(FfnSnapshot(step=step, layers=layers))
    model = expand_moe(wired, snaps, 3, 2, seed=12)
    assert model.embed.dtype == np.float64

    names = [n for n, _ in named_parameters(model)]
    assert any(n.startswith("alpha.") for n in names)
    assert any(".router" in n for n in names)

    ids = rng.integers(0, cfg.vocab_size, (1, 6))
    params = [p for _, p in named_parameters(model)]

    def loss_fn():
        return next_token_loss(forward(model, ids[:, :-1]), ids[:, 1:])

    fd_gradcheck(loss_fn, params, h=1e-4, rtol=1e-3, max_per_tensor=4, seed=13)


@criterion(8, "end-to-end pipeline (extend, merge, duplicate, train, expand, train) learns")
def test_08_end_to_end_pipeline(tmp_path, thai_text):
    corpus = tmp_path / "pattern.txt"
    corpus.write_text("alpha beta gamma " * 600, encoding="utf-8")
    thai = tmp_path / "thai.txt"
    thai.write_text(thai_text, encoding="utf-8")

    def ok(argv):
        assert cli.main(argv) == 0, argv

    base_tok = tmp_path / "base.json"
    ext_tok = tmp_path / "ext.json"
    ok(["tokenizer-train", "--corpus", str(corpus), "--merges", "25",
        "--out", str(base_tok)])
    base_size = Tokenizer.load(base_tok).vocab_size
    ok(["tokenizer-extend", "--base", str(base_tok), "--corpus", str(thai),
        "--target-total", str(base_size + 40), "--out", str(ext_tok)])

    cfg = tiny_config(vocab_size=base_size, embed_dim=32, intermediate_dim=48,
                      n_layers=2, n_heads=4, n_kv_heads=2, ctx_len=64)
    cfg_path = tmp_path / "config.json"
    save_config(cfg, cfg_path)
    ok(["init", "--config", str(cfg_path), "--seed", "14",
        "--out", str(tmp_path / "m0.upsk")])
    ok(["embed-merge", "--model", str(tmp_path / "m0.upsk"),
        "--base", str(base_tok), "--extended", str(ext_tok),
        "--out", str(tmp_path / "m1.upsk")])

    plan_path = tmp_path / "plan.json"
    ok(["plan", "--layers", "2", "--block-size", "1", "--usage", "1,2",
        "--out", str(plan_path)])
    ok(["dus", "--model", str(tmp_path / "m1.upsk"), "--v2",
        "--plan", str(plan_path), "--out", str(tmp_path / "m2.upsk")])

    train_cfg = {"steps": 300, "lr": 3e-3, "warmup": 10, "snapshot_every": 100,
                 "ctx_len": 32, "batch": 4, "seed": 0,
                 "sources": [{"path": str(corpus), "weight": 1.0}]}
    (tmp_path / "train1.json").write_text(json.dumps(train_cfg))
    ok(["train", "--model", str(tmp_path / "m2.upsk"),
        "--tokenizer", str(ext_tok), "--train-config", str(tmp_path / "train1.json"),
        "--out-dir", str(tmp_path / "run1")])
    run1 = [json.loads(line) for line in
            (tmp_path / "run1" / "report.jsonl").read_text().splitlines()]
    initial_loss = run1[0]["loss"]
    snaps = sorted(str(p) for p in (tmp_path / "run1").glob("ffn-snapshot-*.upsk"))
    assert len(snaps) == 3

    ok(["moe-expand", "--model", str(tmp_path / "run1" / "model.upsk"),
        "--snapshots", ",".join(snaps), "--experts", "4", "--top-k", "2",
        "--out", str(tmp_path / "m3.upsk")])

    train_cfg2 = dict(train_cfg, steps=100, snapshot_every=0)
    (tmp_path / "train2.json").write_text(json.dumps(train_cfg2))
    ok(["train", "--model", str(tmp_path / "m3.upsk"),
        "--tokenizer", str(ext_tok), "--train-config", str(tmp_path / "train2.json"),
        "--out-dir", str(tmp_path / "run2")])
    run2 = [json.loads(line) for line in
            (tmp_path / "run2" / "report.jsonl").read_text().splitlines()]
    final_loss = run2[-1]["loss"]

    assert final_loss <= 0.7 * initial_loss, (initial_loss, final_loss)
    final = load_model(tmp_path / "run2" / "model.upsk")
    assert final.config.n_experts == 4
    assert len(final.alphas) == 1


@criterion(9, "corpus mixing hits the 27/73 split; packing conserves every token")
def test_09_mixing_and_packing():
    thai_src = CorpusSource("thai", iter([[1]] * 200_000), 0.27)
    multi_src = CorpusSource("multi", iter([[2]] * 200_000), 0.73)
    stream = mix_corpora([thai_src, multi_src], seed=15)
    draws = [next(stream)[0] for _ in range(100_000)]
    assert abs(draws.count(1) / 100_000 - 0.27) < 0.01

    rng = np.random.default_rng(16)
    docs = [list(rng.integers(2, 50, size=rng.integers(1, 40)))
            for _ in range(40)]
    batches = list(pack_sequences(iter(docs), 9, eos_id=1, pad_id=0,
                                  batch_size=4))
    emitted = [t for b in batches for t in b.rows.reshape(-1).tolist()]
    kept = [t for t in emitted if t not in (0, 1)]
    assert Counter(kept) == Counter(t for d in docs for t in d)


@criterion(10, "RoPE is relative, the window rewrite matches the target column")
def test_10_rope_and_window(rng):
    hd = 16
    for _ in range(20):
        q = rng.normal(size=hd)
        k = rng.normal(size=hd)
        m, n, s = (int(x) for x in rng.integers(0, 64, size=3))
        def rot(v, pos):
            return apply_rope(Tensor(v.reshape(1, 1, hd), dtype=np.float64),
                              np.array([pos]), 1e4).data.ravel()
        assert abs(rot(q, m) @ rot(k, n) - rot(q, m + s) @ rot(k, n + s)) < 1e-6

    rewritten = retheta_and_unwindow(PHI3_COLUMN, 1e6)
    assert rewritten.rope_theta == JAI_COLUMN.rope_theta
    assert rewritten.sliding_window is None

    w = 3
    cfg = tiny_config(n_layers=1, sliding_window=w)
    model = build_model(cfg, seed=17)
    seq = 12
    ids = rng.integers(0, cfg.vocab_size, (1, seq))
    out1 = forward(model, ids).data
    far = 2
    ids2 = ids.copy()
    ids2[0, far] = (ids2[0, far] + 1) % cfg.vocab_size
    out2 = forward(model, ids2).data
    for pos in range(seq):
        if pos - far > w:
            assert np.array_equal(out1[0, pos], out2[0, pos])


@criterion(11, "serialization is bit-exact; malformed files raise distinct errors")
def test_11_serialization(tmp_path):
    rng = np.random.default_rng(18)
    for i in range(200):
        tensors = {}
        for j in range(int(rng.integers(0, 6))):
            shape = tuple(int(d) for d in rng.integers(0, 5,
                                                       size=rng.integers(0, 4)))
            dtype = np.float32 if rng.random() < 0.5 else np.float64
            tensors[f"t{i}.{j}"] = rng.normal(size=shape).astype(dtype)
        path = tmp_path / f"fix{i}.upsk"
        save_container(tensors, path)
        loaded = load_container(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert loaded[name].dtype == tensors[name].dtype
            assert loaded[name].shape == tensors[name].shape
            assert loaded[name].tobytes() == tensors[name].tobytes()

    for i, cfg in enumerate((PHI3_COLUMN, JAI_COLUMN, tiny_config())):
        path = tmp_path / f"cfg{i}.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    good = tmp_path / "good.upsk"
    save_container({"w": np.ones(4, dtype=np.float32)}, good)
    blob = good.read_bytes()

    truncated = tmp_path / "trunc.upsk"
    truncated.write_bytes(blob[:-4])
    with pytest.raises(TruncationError):
        load_container(truncated)

    overlapping = tmp_path / "overlap.upsk"
    header = json.dumps({"a": {"dtype": "f32", "shape": [2], "offset": 0, "nbytes": 8},
                         "b": {"dtype": "f32", "shape": [2], "offset": 4,
                               "nbytes": 8}}).encode()
    from upscale_kit.container import MAGIC
    overlapping.write_bytes(MAGIC + len(header).to_bytes(8, "little") + header
                            + b"\x00" * 12)
    with pytest.raises(OverlapError):
        load_container(overlapping)

    bad_json = tmp_path / "badjson.upsk"
    bad_json.write_bytes(MAGIC + (9).to_bytes(8, "little") + b"{bad json")
    with pytest.raises(HeaderError):
        load_container(bad_json)

    assert not issubclass(TruncationError, (OverlapError, HeaderError))
    assert not issubclass(OverlapError, (TruncationError, HeaderError))
    assert not issubclass(HeaderError, (TruncationError, OverlapError))
