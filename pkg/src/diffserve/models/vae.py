"""Slim convolutional autoencoder between pixel and latent space.

Encode scales the raw latent by ``scaling_factor`` so downstream noise
math sees roughly unit-variance inputs; decode divides it back out first
and clamps the reconstruction to the [-1, 1] pixel range. Deliberately
shallow: at toy sizes the decoder sits on the request hot path and this
keeps it a handful of convs.
"""
from __future__ import annotations

from .. import tensor as T
from ..tensor import Tensor
from .bundle import VAEConfig

_ENC_CHANNELS = (16, 32, 32)
_DEC_CHANNELS = (32, 32, 16)


def _num_levels(cfg: VAEConfig) -> int:
    return cfg.downsample_factor.bit_length() - 1


def param_shapes(cfg: VAEConfig) -> dict[str, tuple[int, ...]]:
    levels = _num_levels(cfg)
    if levels != len(_ENC_CHANNELS):
        raise ValueError(f"downsample_factor {cfg.downsample_factor} needs {levels} conv stages; this architecture has {len(_ENC_CHANNELS)}")
    shapes: dict[str, tuple[int, ...]] = {}
    c = 3
    for i, c_out in enumerate(_ENC_CHANNELS):
        shapes[f"enc.c{i}.w"] = (c_out, c, 3, 3)
        shapes[f"enc.c{i}.b"] = (c_out,)
        c = c_out
    shapes["enc.out.w"] = (cfg.latent_channels, c, 3, 3)
    shapes["enc.out.b"] = (cfg.latent_channels,)

    shapes["dec.in.w"] = (_DEC_CHANNELS[0], cfg.latent_channels, 3, 3)
    shapes["dec.in.b"] = (_DEC_CHANNELS[0],)
    c = _DEC_CHANNELS[0]
    for i, c_out in enumerate(_DEC_CHANNELS):
        shapes[f"dec.c{i}.w"] = (c_out, c, 3, 3)
        shapes[f"dec.c{i}.b"] = (c_out,)
        c = c_out
    shapes["dec.out.w"] = (3, c, 3, 3)
    shapes["dec.out.b"] = (3,)
    return shapes


def _check_image(cfg: VAEConfig, shape):
    if len(shape) != 3 or shape[0] != 3:
        raise T.ShapeError(f"image must be 3xHxW, got {shape}")
    f = cfg.downsample_factor
    if shape[1] % f or shape[2] % f:
        raise T.ShapeError(f"image dims {shape[1]}x{shape[2]} must be divisible by {f}")


def vae_encode(image: Tensor, params: dict[str, Tensor], cfg: VAEConfig) -> Tensor:
    """3xHxW pixels in [-1,1] -> latent_channels x H/f x W/f."""
    _check_image(cfg, image.shape)
    h = image
    for i in range(len(_ENC_CHANNELS)):
        h = T.conv2d(h, params[f"enc.c{i}.w"], params[f"enc.c{i}.b"], stride=2, padding=1)
        h = T.silu(h, out=h)
    h = T.conv2d(h, params["enc.out.w"], params["enc.out.b"], padding=1)
    return T.scale(h, cfg.scaling_factor, out=h)


def vae_decode(latent: Tensor, params: dict[str, Tensor], cfg: VAEConfig, out: Tensor | None = None) -> Tensor:
    """Latent -> 3xHxW pixels, clamped to [-1,1]."""
    if len(latent.shape) != 3 or latent.shape[0] != cfg.latent_channels:
        raise T.ShapeError(f"latent must be {cfg.latent_channels}xhxw, got {latent.shape}")
    h = T.divide_scalar(latent, cfg.scaling_factor)
    h = T.conv2d(h, params["dec.in.w"], params["dec.in.b"], padding=1)
    h = T.silu(h, out=h)
    for i in range(len(_DEC_CHANNELS)):
        h = T.resize_nearest(h, 2)
        h = T.conv2d(h, params[f"dec.c{i}.w"], params[f"dec.c{i}.b"], padding=1)
        h = T.silu(h, out=h)
    h = T.conv2d(h, params["dec.out.w"], params["dec.out.b"], padding=1, out=out)
    return T.clamp(h, -1.0, 1.0, out=h)
