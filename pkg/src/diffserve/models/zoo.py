"""The seeded toy model zoo: build it in memory, write it to disk, serve it.

Three base models share one architecture (weights differ by seed) so the
same adapters attach to all of them. `seed_zoo` materializes the bundles
and a registry under a directory; `load_model` assembles a servable
model back out of one.
"""

from __future__ import annotations

from pathlib import Path

from ..adapters import ControlNetAdapter, LoraAdapter, attention_projection_targets
from ..pipelines import LoadedModel
from ..schedulers import make_schedule
from .bundle import (
    ControlNetConfig,
    LoRAConfig,
    TextEncoderConfig,
    UNetConfig,
    VAEConfig,
    _expected_shapes,
    init_seeded,
    load_bundle,
    save_bundle,
)
from .registry import AdapterEntry, Registry, RegistryEntry, load_registry, save_registry

__all__ = ["ZOO_MODELS", "build_model", "seed_zoo", "load_model", "open_zoo"]

# name -> (domain tag, default size, per-component seed base)
ZOO_MODELS = {
    "toy-general": ("general", 64, 0),
    "toy-general-x": ("general", 96, 10),
    "toy-artist": ("artist", 64, 20),
}

_ADAPTERS = (("style", "lora", 7), ("edges", "controlnet", 4))


def _bundles(name: str):
    try:
        _, _, base = ZOO_MODELS[name]
    except KeyError:
        raise KeyError(f"no zoo model named {name!r}; known: {sorted(ZOO_MODELS)}") from None
    return {
        "text_encoder": init_seeded(TextEncoderConfig(), base + 1),
        "unet": init_seeded(UNetConfig(), base + 2),
        "vae": init_seeded(VAEConfig(), base + 3),
    }


def _adapter_bundle(kind: str, seed: int):
    if kind == "lora":
        unet_cfg = UNetConfig()
        targets = tuple(attention_projection_targets(unet_cfg))
        shapes = _expected_shapes("unet", unet_cfg)
        dims = tuple(shapes[t] for t in targets)
        return init_seeded(LoRAConfig(targets=targets, target_dims=dims), seed)
    return init_seeded(ControlNetConfig(), seed)


def build_model(name: str) -> LoadedModel:
    """A servable zoo model straight from seeds, no disk involved."""
    parts = _bundles(name)
    _, size, _ = ZOO_MODELS[name]
    loras = {}
    controlnets = {}
    for adapter_name, kind, seed in _ADAPTERS:
        bundle = _adapter_bundle(kind, seed)
        if kind == "lora":
            loras[adapter_name] = LoraAdapter.from_bundle(bundle, adapter_name)
        else:
            controlnets[adapter_name] = ControlNetAdapter(adapter_name, bundle)
    return LoadedModel(
        name=name,
        text_encoder=parts["text_encoder"],
        unet=parts["unet"],
        vae=parts["vae"],
        default_width=size,
        default_height=size,
        loras=loras,
        controlnets=controlnets,
        schedule=make_schedule(),
        embedding_cache={},
        reuse_buffers=True,
    )


def seed_zoo(root: str | Path) -> Registry:
    """Write every zoo model and adapter under `root` plus registry.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, (domain, size, _) in ZOO_MODELS.items():
        parts = _bundles(name)
        files = {}
        for component, bundle in parts.items():
            rel = f"{name}/{component}.json"
            (root / name).mkdir(exist_ok=True)
            save_bundle(bundle, root / rel)
            files[component] = rel
        entries.append(RegistryEntry(
            model_name=name,
            domain_tag=domain,
            default_width=size,
            default_height=size,
            param_count=sum(b.param_count() for b in parts.values()),
            adapters=[a for a, _, _ in _ADAPTERS],
            files=files,
        ))
    adapter_entries = []
    (root / "adapters").mkdir(exist_ok=True)
    for adapter_name, kind, seed in _ADAPTERS:
        bundle = _adapter_bundle(kind, seed)
        rel = f"adapters/{adapter_name}.json"
        save_bundle(bundle, root / rel)
        adapter_entries.append(AdapterEntry(
            name=adapter_name, kind=kind, param_count=bundle.param_count(), path=rel,
        ))
    registry = Registry(models=entries, adapters=adapter_entries)
    save_registry(registry, root / "registry.json")
    return registry


def load_model(root: str | Path, registry: Registry, name: str) -> LoadedModel:
    """Assemble a servable model from its on-disk bundles."""
    root = Path(root)
    entry = registry.model(name)
    parts = {c: load_bundle(root / rel) for c, rel in entry.files.items()}
    loras = {}
    controlnets = {}
    for adapter_name in entry.adapters:
        info = registry.adapter(adapter_name)
        bundle = load_bundle(root / info.path)
        if info.kind == "lora":
            loras[adapter_name] = LoraAdapter.from_bundle(bundle, adapter_name)
        else:
            controlnets[adapter_name] = ControlNetAdapter(adapter_name, bundle)
    return LoadedModel(
        name=name,
        text_encoder=parts["text_encoder"],
        unet=parts["unet"],
        vae=parts["vae"],
        default_width=entry.default_width,
        default_height=entry.default_height,
        loras=loras,
        controlnets=controlnets,
        schedule=make_schedule(),
        embedding_cache={},
        reuse_buffers=True,
    )


def open_zoo(root: str | Path) -> Registry:
    """Registry under `root`, seeding the toy zoo on first use."""
    root = Path(root)
    index = root / "registry.json"
    if not index.exists():
        return seed_zoo(root)
    return load_registry(index)
