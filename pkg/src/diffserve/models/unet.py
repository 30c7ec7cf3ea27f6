"""Noise-prediction U-Net with cross-attention text conditioning.

Two-level encoder/decoder over the latent grid: one time-conditioned
residual block per level, a stride-2 conv between levels, cross-attention
at the levels named in ``attn_resolutions`` (and always in the middle).
The decoder consumes two skip tensors per level, so a control branch has
2*levels + 1 injection points (skips plus the middle feature).
"""
from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .bundle import ControlNetConfig, UNetConfig


class ControlResiduals:
    """Additive features from a control branch, paired with unet_forward.

    skips line up with the encoder's skip stack (shallow to deep);
    mid is added to the middle feature after the mid blocks.
    """

    def __init__(self, skips: list[Tensor], mid: Tensor):
        self.skips = skips
        self.mid = mid


def _level_channels(cfg) -> list[int]:
    return [cfg.base_channels * m for m in cfg.channel_mults]


def _res_shapes(prefix: str, c_in: int, c_out: int, cfg) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.gn1.g": (c_in,),
        f"{prefix}.gn1.b": (c_in,),
        f"{prefix}.conv1.w": (c_out, c_in, 3, 3),
        f"{prefix}.conv1.b": (c_out,),
        f"{prefix}.temb.w": (c_out, cfg.time_embed_dim),
        f"{prefix}.temb.b": (c_out,),
        f"{prefix}.gn2.g": (c_out,),
        f"{prefix}.gn2.b": (c_out,),
        f"{prefix}.conv2.w": (c_out, c_out, 3, 3),
        f"{prefix}.conv2.b": (c_out,),
    }
    if c_in != c_out:
        shapes[f"{prefix}.skip.w"] = (c_out, c_in, 1, 1)
        shapes[f"{prefix}.skip.b"] = (c_out,)
    return shapes


def _attn_shapes(prefix: str, c: int, cfg) -> dict[str, tuple[int, ...]]:
    shapes = {f"{prefix}.gn.g": (c,), f"{prefix}.gn.b": (c,)}
    dims = {"wq": (c, c), "wk": (c, cfg.cross_attn_dim), "wv": (c, cfg.cross_attn_dim), "wo": (c, c)}
    for name, shape in dims.items():
        shapes[f"{prefix}.{name}"] = shape
        shapes[f"{prefix}.{name.replace('w', 'b')}"] = (shape[0],)
    return shapes


def _encoder_shapes(cfg) -> dict[str, tuple[int, ...]]:
    """Shapes shared by the U-Net encoder half and a control branch."""
    chans = _level_channels(cfg)
    d = cfg.time_embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "time_mlp.w1": (d, d),
        "time_mlp.b1": (d,),
        "time_mlp.w2": (d, d),
        "time_mlp.b2": (d,),
        "conv_in.w": (chans[0], cfg.in_channels, 3, 3),
        "conv_in.b": (chans[0],),
    }
    attn_levels = cfg.attn_resolutions
    c = chans[0]
    for lvl, c_out in enumerate(chans):
        shapes.update(_res_shapes(f"down{lvl}.res", c, c_out, cfg))
        c = c_out
        if lvl in attn_levels:
            shapes.update(_attn_shapes(f"down{lvl}.attn", c, cfg))
        if lvl < len(chans) - 1:
            shapes[f"down{lvl}.down.w"] = (c, c, 3, 3)
            shapes[f"down{lvl}.down.b"] = (c,)
    shapes.update(_res_shapes("mid.res1", c, c, cfg))
    shapes.update(_attn_shapes("mid.attn", c, cfg))
    shapes.update(_res_shapes("mid.res2", c, c, cfg))
    return shapes


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    chans = _level_channels(cfg)
    attn_levels = cfg.attn_resolutions
    shapes = _encoder_shapes(cfg)
    for lvl in range(len(chans) - 1, -1, -1):
        c = chans[lvl]
        below = chans[lvl - 1] if lvl > 0 else chans[0]
        # res0 merges the level's own skip; res1 merges the pre-level skip
        shapes.update(_res_shapes(f"up{lvl}.res0", c + c, c, cfg))
        if lvl in attn_levels:
            shapes.update(_attn_shapes(f"up{lvl}.attn", c, cfg))
        shapes.update(_res_shapes(f"up{lvl}.res1", c + below, c, cfg))
        if lvl > 0:
            shapes[f"up{lvl}.up.w"] = (below, c, 3, 3)
            shapes[f"up{lvl}.up.b"] = (below,)
    shapes["out.gn.g"] = (chans[0],)
    shapes["out.gn.b"] = (chans[0],)
    shapes["out.conv.w"] = (cfg.in_channels, chans[0], 3, 3)
    shapes["out.conv.b"] = (cfg.in_channels,)
    return shapes


def controlnet_param_shapes(cfg: ControlNetConfig) -> dict[str, tuple[int, ...]]:
    if cfg.cond_channels[-1] != cfg.base_channels:
        raise ValueError(
            f"last cond embedder channel {cfg.cond_channels[-1]} must equal base_channels {cfg.base_channels}"
        )
    unet_cfg = cfg.unet_view()
    shapes = _encoder_shapes(unet_cfg)
    c = cfg.conditioning_channels
    for i, c_out in enumerate(cfg.cond_channels):
        shapes[f"cond.c{i}.w"] = (c_out, c, 3, 3)
        shapes[f"cond.c{i}.b"] = (c_out,)
        c = c_out
    chans = _level_channels(unet_cfg)
    skip_chans = _skip_channels(chans)
    for i, sc in enumerate(skip_chans):
        shapes[f"zero_conv{i}.w"] = (sc, sc, 1, 1)
        shapes[f"zero_conv{i}.b"] = (sc,)
    shapes["zero_conv_mid.w"] = (chans[-1], chans[-1], 1, 1)
    shapes["zero_conv_mid.b"] = (chans[-1],)
    return shapes


def _skip_channels(chans: list[int]) -> list[int]:
    skip = [chans[0]]
    for lvl, c in enumerate(chans):
        skip.append(c)
        if lvl < len(chans) - 1:
            skip.append(c)
    return skip


def time_embedding(t: int, dim: int) -> Tensor:
    """Sinusoidal embedding, sin lanes then cos lanes (t=0 -> zeros, ones)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)
    return Tensor.from_numpy(emb.reshape(1, dim))


def _res_block(x: Tensor, temb: Tensor, p: dict[str, Tensor], prefix: str, groups: int,
               ws: T.ConvWorkspace | None = None) -> Tensor:
    h = T.group_norm(x, groups, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"])
    h = T.silu(h, out=h)
    h = T.conv2d(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1, ws=ws)
    tproj = T.linear(T.silu(temb), p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"])
    ha = h.np()
    ha += tproj.np().reshape(-1, 1, 1)
    h = T.group_norm(h, groups, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"])
    h = T.silu(h, out=h)
    h = T.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=1, ws=ws)
    if f"{prefix}.skip.w" in p:
        x = T.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"], ws=ws)
    return T.add(h, x, out=h)


def _cross_attn(x: Tensor, text: Tensor, p: dict[str, Tensor], prefix: str, groups: int) -> Tensor:
    c, hh, ww = x.shape
    n = T.group_norm(x, groups, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"])
    flat = Tensor.from_numpy(n.np().reshape(c, hh * ww).T)
    q = T.linear(flat, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = T.linear(text, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = T.linear(text, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    att = T.attention(q, k, v)
    o = T.linear(att, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    y = x.copy()
    ya = y.np()
    ya += o.np().T.reshape(c, hh, ww)
    return y


def _time_feature(t: int, p: dict[str, Tensor], cfg) -> Tensor:
    temb = time_embedding(t, cfg.time_embed_dim)
    h = T.linear(temb, p["time_mlp.w1"], p["time_mlp.b1"])
    h = T.silu(h, out=h)
    return T.linear(h, p["time_mlp.w2"], p["time_mlp.b2"])


def _check_spatial(cfg, shape):
    c, h, w = shape
    levels = len(cfg.channel_mults)
    div = 2 ** (levels - 1)
    if c != cfg.in_channels:
        raise T.ShapeError(f"latent has {c} channels, config expects {cfg.in_channels}")
    if h < 4 or w < 4 or h % div or w % div:
        raise T.ShapeError(f"latent {h}x{w} must be >= 4 and divisible by {div}")


def _encoder_pass(latent, temb, text_emb, p, cfg, cond_feature=None, ws=None):
    """Shared by the U-Net proper and control branches.

    Returns (skip stack, middle feature). cond_feature, when given, is
    added right after conv_in (control branches inject there).
    """
    attn_levels = cfg.attn_resolutions
    groups = cfg.groups
    h = T.conv2d(latent, p["conv_in.w"], p["conv_in.b"], padding=1, ws=ws)
    if cond_feature is not None:
        h = T.add(h, cond_feature, out=h)
    skips = [h]
    for lvl in range(len(cfg.channel_mults)):
        h = _res_block(h, temb, p, f"down{lvl}.res", groups, ws=ws)
        if lvl in attn_levels:
            h = _cross_attn(h, text_emb, p, f"down{lvl}.attn", groups)
        skips.append(h)
        if lvl < len(cfg.channel_mults) - 1:
            h = T.conv2d(h, p[f"down{lvl}.down.w"], p[f"down{lvl}.down.b"], stride=2, padding=1, ws=ws)
            skips.append(h)
    h = _res_block(h, temb, p, "mid.res1", groups, ws=ws)
    h = _cross_attn(h, text_emb, p, "mid.attn", groups)
    h = _res_block(h, temb, p, "mid.res2", groups, ws=ws)
    return skips, h


def unet_forward(
    latent: Tensor,
    timestep: int,
    text_emb: Tensor,
    params: dict[str, Tensor],
    cfg: UNetConfig,
    control_residuals: ControlResiduals | None = None,
    out: Tensor | None = None,
    ws: T.ConvWorkspace | None = None,
) -> Tensor:
    """Predict noise for one latent at one timestep."""
    _check_spatial(cfg, latent.shape)
    if timestep < 0:
        raise ValueError(f"timestep must be >= 0, got {timestep}")
    attn_levels = cfg.attn_resolutions
    groups = cfg.groups

    temb = _time_feature(timestep, params, cfg)
    skips, h = _encoder_pass(latent, temb, text_emb, params, cfg, ws=ws)

    if control_residuals is not None:
        res = control_residuals
        if len(res.skips) != len(skips):
            raise T.ShapeError(
                f"control provides {len(res.skips)} skip residuals, architecture has {len(skips)}"
            )
        skips = [T.add(s, r) for s, r in zip(skips, res.skips)]
        h = T.add(h, res.mid)

    for lvl in range(len(cfg.channel_mults) - 1, -1, -1):
        h = _res_block(T.concat([h, skips.pop()], axis=0), temb, params, f"up{lvl}.res0", groups, ws=ws)
        if lvl in attn_levels:
            h = _cross_attn(h, text_emb, params, f"up{lvl}.attn", groups)
        h = _res_block(T.concat([h, skips.pop()], axis=0), temb, params, f"up{lvl}.res1", groups, ws=ws)
        if lvl > 0:
            h = T.resize_nearest(h, 2)
            h = T.conv2d(h, params[f"up{lvl}.up.w"], params[f"up{lvl}.up.b"], padding=1, ws=ws)

    h = T.group_norm(h, groups, params["out.gn.g"], params["out.gn.b"])
    h = T.silu(h, out=h)
    return T.conv2d(h, params["out.conv.w"], params["out.conv.b"], padding=1, out=out, ws=ws)


def condition_feature(cond_image: Tensor, params: dict[str, Tensor], cfg: ControlNetConfig,
                      ws: T.ConvWorkspace | None = None) -> Tensor:
    """Embed a cxHxW condition map down to the latent grid."""
    if cond_image.ndim != 3 or cond_image.shape[0] != cfg.conditioning_channels:
        raise T.ShapeError(
            f"condition must be {cfg.conditioning_channels}xHxW, got {cond_image.shape}"
        )
    h = cond_image
    for i in range(len(cfg.cond_channels)):
        h = T.conv2d(h, params[f"cond.c{i}.w"], params[f"cond.c{i}.b"], stride=2, padding=1, ws=ws)
        if i < len(cfg.cond_channels) - 1:
            h = T.silu(h, out=h)
    return h


def controlnet_forward(
    latent: Tensor,
    timestep: int,
    text_emb: Tensor,
    cond_image: Tensor,
    params: dict[str, Tensor],
    cfg: ControlNetConfig,
    ws: T.ConvWorkspace | None = None,
) -> ControlResiduals:
    """Run the control branch; returns residuals for unet_forward."""
    unet_cfg = cfg.unet_view()
    _check_spatial(unet_cfg, latent.shape)
    cond = condition_feature(cond_image, params, cfg, ws=ws)
    if cond.shape[1:] != latent.shape[1:]:
        raise T.ShapeError(
            f"condition embeds to {cond.shape[1:]}, latent grid is {latent.shape[1:]}"
        )
    temb = _time_feature(timestep, params, cfg)
    skips, mid = _encoder_pass(latent, temb, text_emb, params, unet_cfg, cond_feature=cond, ws=ws)
    out_skips = [
        T.conv2d(s, params[f"zero_conv{i}.w"], params[f"zero_conv{i}.b"], ws=ws)
        for i, s in enumerate(skips)
    ]
    mid_r = T.conv2d(mid, params["zero_conv_mid.w"], params["zero_conv_mid.b"], ws=ws)
    return ControlResiduals(out_skips, mid_r)
