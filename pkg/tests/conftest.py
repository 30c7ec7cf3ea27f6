import numpy as np
import pytest

from diffserve.adapters import ControlNetAdapter, LoraAdapter, attention_projection_targets
from diffserve.models.bundle import (
    ControlNetConfig,
    LoRAConfig,
    TextEncoderConfig,
    UNetConfig,
    VAEConfig,
    init_seeded,
)
from diffserve.pipelines import LoadedModel
from diffserve.schedulers import make_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def build_toy_model(reuse_buffers: bool = True, cache_embeddings: bool = False) -> LoadedModel:
    """Small seeded model with one LoRA and one (zero-initialized) ControlNet."""
    unet = init_seeded(UNetConfig(), 2)
    targets = tuple(attention_projection_targets(unet.config))
    dims = tuple(unet.tensors[t].shape for t in targets)
    lora_bundle = init_seeded(LoRAConfig(targets=targets, target_dims=dims), 7)
    return LoadedModel(
        name="toy",
        text_encoder=init_seeded(TextEncoderConfig(), 1),
        unet=unet,
        vae=init_seeded(VAEConfig(), 3),
        loras={"style": LoraAdapter.from_bundle(lora_bundle, "style")},
        controlnets={"edges": ControlNetAdapter("edges", init_seeded(ControlNetConfig(), 4))},
        schedule=make_schedule(),
        embedding_cache={} if cache_embeddings else None,
        reuse_buffers=reuse_buffers,
    )


@pytest.fixture(scope="session")
def toy_model():
    return build_toy_model()
