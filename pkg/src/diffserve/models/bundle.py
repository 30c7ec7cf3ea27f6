"""Model configs and the weight bundle file format.

A bundle on disk is a JSON manifest next to a raw little-endian float32
blob. The manifest records tensor names, shapes, and byte offsets plus a
sha256 over the blob, so a load either reproduces the saved tensors
bit-for-bit or fails loudly. No pickling: the format stays readable from
any language.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import Rng, Tensor

FORMAT_VERSION = 1


class BundleError(ValueError):
    """Manifest or blob failed validation."""


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 259  # 256 bytes + BOS/EOS/PAD
    max_tokens: int = 32
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.max_tokens < 2:
            raise ValueError("max_tokens must allow at least BOS and EOS")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    time_embed_dim: int = 128
    cross_attn_dim: int = 64
    groups: int = 8
    attn_resolutions: tuple | None = None  # level indices; None means deepest only

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        attn = self.attn_resolutions
        attn = (len(self.channel_mults) - 1,) if attn is None else tuple(attn)
        object.__setattr__(self, "attn_resolutions", attn)


@dataclass(frozen=True)
class ControlNetConfig:
    """Control branch: a copy of the U-Net encoder half plus a condition embedder."""

    in_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    time_embed_dim: int = 128
    cross_attn_dim: int = 64
    groups: int = 8
    attn_resolutions: tuple | None = None
    conditioning_channels: int = 1  # canny/depth maps are single-channel
    cond_channels: tuple = (16, 16, 32)

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "cond_channels", tuple(self.cond_channels))
        attn = self.attn_resolutions
        attn = (len(self.channel_mults) - 1,) if attn is None else tuple(attn)
        object.__setattr__(self, "attn_resolutions", attn)

    def unet_view(self) -> UNetConfig:
        return UNetConfig(
            in_channels=self.in_channels,
            base_channels=self.base_channels,
            channel_mults=self.channel_mults,
            time_embed_dim=self.time_embed_dim,
            cross_attn_dim=self.cross_attn_dim,
            groups=self.groups,
            attn_resolutions=self.attn_resolutions,
        )


@dataclass(frozen=True)
class VAEConfig:
    latent_channels: int = 4
    downsample_factor: int = 8
    scaling_factor: float = 0.18215

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")


@dataclass(frozen=True)
class LoRAConfig:
    """Low-rank residual weights for a set of named projection targets.

    target_dims records each target's (out_features, in_features) so a
    bundle is self-describing without the base model present.
    """

    r: int = 4
    alpha: float = 4.0
    targets: tuple = ()
    target_dims: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "target_dims", tuple(tuple(d) for d in self.target_dims))
        if self.r < 1:
            raise ValueError(f"rank must be >= 1, got {self.r}")
        if len(self.targets) != len(self.target_dims):
            raise ValueError("targets and target_dims must pair up")


_KIND_TO_CONFIG = {
    "text_encoder": TextEncoderConfig,
    "unet": UNetConfig,
    "vae": VAEConfig,
    "controlnet": ControlNetConfig,
    "lora": LoRAConfig,
}
_CONFIG_TO_KIND = {v: k for k, v in _KIND_TO_CONFIG.items()}


@dataclass
class ModelBundle:
    """Immutable-by-convention weight set; share freely across generations."""

    kind: str
    config: object
    tensors: dict[str, Tensor]
    fingerprint: str = ""

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _expected_shapes(kind: str, config) -> dict[str, tuple[int, ...]]:
    # local imports: the architecture modules import nothing from here
    from . import text_encoder, unet, vae

    if kind == "text_encoder":
        return text_encoder.param_shapes(config)
    if kind == "unet":
        return unet.param_shapes(config)
    if kind == "controlnet":
        return unet.controlnet_param_shapes(config)
    if kind == "vae":
        return vae.param_shapes(config)
    if kind == "lora":
        return _lora_shapes(config)
    raise BundleError(f"unknown model kind {kind!r}")


def _pack(tensors: dict[str, Tensor]) -> tuple[bytes, list[dict]]:
    records = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        raw = np.ascontiguousarray(t.np(), dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(t.shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), records


def _checksum(blob: bytes) -> str:
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def save_bundle(bundle: ModelBundle, path: str | Path) -> Path:
    """Write <path> (manifest JSON) and a sibling .bin blob."""
    path = Path(path)
    blob, records = _pack(bundle.tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_kind": bundle.kind,
        "config": asdict(bundle.config),
        "tensors": records,
        "blob_checksum": _checksum(blob),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=1))
    bundle.fingerprint = manifest["blob_checksum"]
    return path


def load_bundle(path: str | Path) -> ModelBundle:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise BundleError(f"cannot read manifest {path}: {e}") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"unknown format_version {version!r} (this build reads {FORMAT_VERSION})")

    kind = manifest.get("model_kind")
    if kind not in _KIND_TO_CONFIG:
        raise BundleError(f"unknown model kind {kind!r}")
    config_cls = _KIND_TO_CONFIG[kind]
    try:
        config = config_cls(**manifest["config"])
    except (TypeError, ValueError) as e:
        raise BundleError(f"bad config for {kind}: {e}") from e

    blob = path.with_suffix(".bin").read_bytes()
    checksum = manifest.get("blob_checksum", "")
    if _checksum(blob) != checksum:
        raise BundleError(f"blob checksum mismatch for {path.with_suffix('.bin')}")

    records = manifest["tensors"]
    offsets = [r["byte_offset"] for r in records]
    if offsets != sorted(offsets):
        raise BundleError("tensor offsets out of order")
    total = 0
    tensors: dict[str, Tensor] = {}
    for r in records:
        shape = tuple(r["shape"])
        nbytes = int(np.prod(shape)) * 4
        if r["byte_offset"] != total:
            raise BundleError(f"tensor {r['name']!r}: offset {r['byte_offset']} leaves a gap or overlap")
        total += nbytes
        flat = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=r["byte_offset"])
        tensors[r["name"]] = Tensor.from_numpy(flat.reshape(shape))
    if total != len(blob):
        raise BundleError(f"tensor sizes sum to {total} bytes but blob has {len(blob)}")

    expected = _expected_shapes(kind, config)
    for name, shape in expected.items():
        if name not in tensors:
            raise BundleError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise BundleError(
                f"tensor {name!r} has shape {tensors[name].shape}, config expects {shape}"
            )
    extra = set(tensors) - set(expected)
    if extra:
        raise BundleError(f"unexpected tensors: {sorted(extra)}")

    return ModelBundle(kind=kind, config=config, tensors=tensors, fingerprint=checksum)


def init_seeded(config, seed: int) -> ModelBundle:
    """Deterministic random-init bundle for the given config record.

    Weights draw from a truncated normal (std 0.02); biases and norm
    shifts start at zero, norm gains at one. Zero-guarded tensors
    (control-branch output convs) start at exactly zero.
    """
    kind = _CONFIG_TO_KIND.get(type(config))
    if kind is None:
        raise BundleError(f"no model kind for config {type(config).__name__}")
    shapes = _expected_shapes(kind, config)
    rng = Rng(seed)
    tensors: dict[str, Tensor] = {}
    for i, name in enumerate(sorted(shapes)):
        shape = shapes[name]
        if _init_zero(kind, name):
            tensors[name] = Tensor.zeros(shape)
        elif _init_one(name):
            tensors[name] = Tensor.full(shape, 1.0)
        else:
            tensors[name] = rng.split(i).truncated_normal(shape, std=0.02)
    blob, _ = _pack(tensors)
    return ModelBundle(kind=kind, config=config, tensors=tensors, fingerprint=_checksum(blob))


def _lora_shapes(config: LoRAConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for target, (d, k) in zip(config.targets, config.target_dims):
        shapes[f"{target}.A"] = (config.r, k)
        shapes[f"{target}.B"] = (d, config.r)
    return shapes


def _init_zero(kind: str, name: str) -> bool:
    if name.endswith(".b") or name.endswith(".beta"):
        return True
    if kind == "controlnet" and name.startswith("zero_conv"):
        return True
    return False


def _init_one(name: str) -> bool:
    return name.endswith(".g") or name.endswith(".gamma")
