"""Byte-level tokenizer and a small transformer text encoder.

Prompts are encoded as raw utf-8 bytes (ids 0-255) framed by BOS/EOS and
padded, so any language fits in a 259-entry vocabulary; multi-byte
scripts simply use more positions.
"""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .bundle import TextEncoderConfig

BOS = 256
EOS = 257
PAD = 258


def tokenize(text: str, max_tokens: int = 32) -> list[int]:
    """BOS + utf-8 bytes + EOS, truncated to fit, padded to max_tokens."""
    body = list(text.encode("utf-8"))[: max_tokens - 2]
    ids = [BOS] + body + [EOS]
    ids.extend([PAD] * (max_tokens - len(ids)))
    return ids


def param_shapes(cfg: TextEncoderConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    hidden = 4 * d
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb.w": (cfg.vocab_size, d),
        "pos_emb.w": (cfg.max_tokens, d),
        "ln_f.g": (d,),
        "ln_f.b": (d,),
    }
    for i in range(cfg.layers):
        p = f"layer{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}"] = (d, d)
        for proj in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{proj}"] = (d,)
        shapes[f"{p}.mlp.w1"] = (hidden, d)
        shapes[f"{p}.mlp.b1"] = (hidden,)
        shapes[f"{p}.mlp.w2"] = (d, hidden)
        shapes[f"{p}.mlp.b2"] = (d,)
    return shapes


def _self_attention(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    n, d = x.shape
    hd = d // heads
    q = T.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]).np()
    k = T.linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]).np()
    v = T.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]).np()
    parts = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        parts.append(
            T.attention(Tensor.from_numpy(q[:, sl]), Tensor.from_numpy(k[:, sl]),
                        Tensor.from_numpy(v[:, sl]))
        )
    merged = T.concat(parts, axis=1)
    return T.linear(merged, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def encode_text(tokens, params: dict[str, Tensor], cfg: TextEncoderConfig) -> Tensor:
    """Full-sequence embedding, shape (max_tokens, embed_dim)."""
    if len(tokens) != cfg.max_tokens:
        raise ValueError(f"expected {cfg.max_tokens} tokens, got {len(tokens)}")
    x = T.add(T.take_rows(params["tok_emb.w"], tokens), params["pos_emb.w"])
    for i in range(cfg.layers):
        p = f"layer{i}"
        h = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = T.add(x, _self_attention(h, params, f"{p}.attn", cfg.heads))
        h = T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        h = T.linear(h, params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"])
        h = T.gelu(h)
        h = T.linear(h, params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"])
        x = T.add(x, h)
    return T.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
