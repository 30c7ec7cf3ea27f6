from .bundle import (
    BundleError,
    ControlNetConfig,
    LoRAConfig,
    ModelBundle,
    TextEncoderConfig,
    UNetConfig,
    VAEConfig,
    init_seeded,
    load_bundle,
    save_bundle,
)
from .registry import AdapterEntry, Registry, RegistryEntry, domain_label, load_registry, save_registry

__all__ = [
    "AdapterEntry",
    "BundleError",
    "ControlNetConfig",
    "LoRAConfig",
    "ModelBundle",
    "Registry",
    "RegistryEntry",
    "TextEncoderConfig",
    "UNetConfig",
    "VAEConfig",
    "domain_label",
    "init_seeded",
    "load_bundle",
    "load_registry",
    "save_bundle",
    "save_registry",
]
