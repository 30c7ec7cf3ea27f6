"""Model zoo registry: what's servable, at what default size, with which adapters.

The registry file is JSON with two lists: base models and adapters.
Entries carry relative paths to their weight manifests so a models
directory is self-contained and relocatable.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

REGISTRY_VERSION = 1

# short domain tags stored in entries, human labels shown by the API
_DOMAIN_LABELS = {
    "general": "General purpose",
    "artist": "Artist style",
    "anime": "Anime style",
    "food": "Food",
}


def domain_label(tag: str) -> str:
    return _DOMAIN_LABELS.get(tag, tag)


class RegistryError(ValueError):
    pass


@dataclass
class RegistryEntry:
    model_name: str
    domain_tag: str
    default_width: int
    default_height: int
    param_count: int
    adapters: list = field(default_factory=list)
    files: dict = field(default_factory=dict)  # component -> manifest path

    def validate(self, downsample_factor: int = 8) -> None:
        if self.default_width % downsample_factor or self.default_height % downsample_factor:
            raise RegistryError(
                f"{self.model_name}: default size {self.default_width}x{self.default_height} "
                f"not divisible by {downsample_factor}"
            )


@dataclass
class AdapterEntry:
    name: str
    kind: str  # lora | controlnet
    param_count: int
    path: str = ""


@dataclass
class Registry:
    models: list
    adapters: list

    def model(self, name: str) -> RegistryEntry:
        for m in self.models:
            if m.model_name == name:
                return m
        raise KeyError(f"no model named {name!r}; known models: {[m.model_name for m in self.models]}")

    def adapter(self, name: str) -> AdapterEntry:
        for a in self.adapters:
            if a.name == name:
                return a
        raise KeyError(f"no adapter named {name!r}; known adapters: {[a.name for a in self.adapters]}")


def save_registry(registry: Registry, path: str | Path) -> Path:
    path = Path(path)
    doc = {
        "registry_version": REGISTRY_VERSION,
        "models": [asdict(m) for m in registry.models],
        "adapters": [asdict(a) for a in registry.adapters],
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_registry(path: str | Path) -> Registry:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise RegistryError(f"cannot read registry {path}: {e}") from e
    if doc.get("registry_version") != REGISTRY_VERSION:
        raise RegistryError(f"unknown registry_version {doc.get('registry_version')!r}")
    models = [RegistryEntry(**m) for m in doc.get("models", [])]
    adapters = [AdapterEntry(**a) for a in doc.get("adapters", [])]
    for m in models:
        m.validate()
    return Registry(models=models, adapters=adapters)
