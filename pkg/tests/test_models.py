"""Toy model components: tokenizer, encoders, U-Net, weight bundles, registry."""
import json

import numpy as np
import pytest

from diffserve import tensor as T
from diffserve.models import (
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
from diffserve.models import registry as reg
from diffserve.models import text_encoder as te
from diffserve.models import unet as un
from diffserve.models import vae as va
from diffserve.tensor import Rng, Tensor


@pytest.fixture(scope="module")
def text_bundle():
    return init_seeded(TextEncoderConfig(), 1)


@pytest.fixture(scope="module")
def unet_bundle():
    return init_seeded(UNetConfig(), 2)


@pytest.fixture(scope="module")
def vae_bundle():
    return init_seeded(VAEConfig(), 3)


@pytest.fixture(scope="module")
def control_bundle():
    return init_seeded(ControlNetConfig(), 4)


@pytest.fixture(scope="module")
def text_emb(text_bundle):
    toks = te.tokenize("a lighthouse at dusk", 32)
    return te.encode_text(toks, text_bundle.tensors, TextEncoderConfig())


class TestTokenize:
    def test_empty(self):
        ids = te.tokenize("", 32)
        assert ids[:2] == [te.BOS, te.EOS]
        assert ids[2:] == [te.PAD] * 30

    def test_single_ascii(self):
        assert te.tokenize("A", 8) == [256, 65, 257, 258, 258, 258, 258, 258]

    def test_multibyte_utf8(self):
        # 星 encodes to bytes e6 98 9f
        ids = te.tokenize("星", 8)
        assert ids == [256, 0xE6, 0x98, 0x9F, 257, 258, 258, 258]

    def test_truncation_keeps_frame(self):
        ids = te.tokenize("x" * 100, 16)
        assert len(ids) == 16
        assert ids[0] == te.BOS and ids[-1] == te.EOS
        assert te.PAD not in ids

    def test_any_bytes_valid(self):
        ids = te.tokenize("\x00\xff🙂", 32)
        assert all(0 <= i <= 258 for i in ids)
        assert len(ids) == 32


class TestEncodeText:
    def test_output_shape(self, text_bundle):
        ids = te.tokenize("hello", 32)
        out = te.encode_text(ids, text_bundle.tensors, TextEncoderConfig())
        assert out.shape == (32, 64)

    def test_deterministic(self, text_bundle):
        ids = te.tokenize("same prompt", 32)
        a = te.encode_text(ids, text_bundle.tensors, TextEncoderConfig()).np()
        b = te.encode_text(ids, text_bundle.tensors, TextEncoderConfig()).np()
        assert np.array_equal(a, b)

    def test_one_byte_apart_prompts_differ(self, text_bundle):
        cfg = TextEncoderConfig()
        a = te.encode_text(te.tokenize("cat", 32), text_bundle.tensors, cfg).np()
        b = te.encode_text(te.tokenize("cau", 32), text_bundle.tensors, cfg).np()
        assert float(np.linalg.norm(a - b)) > 0

    def test_length_mismatch(self, text_bundle):
        with pytest.raises(ValueError, match="tokens"):
            te.encode_text([256, 257], text_bundle.tensors, TextEncoderConfig())


class TestTimeEmbedding:
    def test_t0_lanes(self):
        emb = un.time_embedding(0, 128).np().reshape(-1)
        assert np.all(emb[:64] == 0.0)
        assert np.all(emb[64:] == 1.0)

    def test_distinct_timesteps(self):
        a = un.time_embedding(1, 128).np()
        b = un.time_embedding(2, 128).np()
        assert not np.array_equal(a, b)


class TestUNetForward:
    def test_output_matches_latent_shape(self, unet_bundle, text_emb):
        for hw in [(8, 8), (8, 12), (12, 12)]:
            lat = Rng(0).normal((4, *hw))
            eps = un.unet_forward(lat, 500, text_emb, unet_bundle.tensors, UNetConfig())
            assert eps.shape == lat.shape

    def test_deterministic(self, unet_bundle, text_emb):
        lat = Rng(1).normal((4, 8, 8))
        a = un.unet_forward(lat, 10, text_emb, unet_bundle.tensors, UNetConfig()).np()
        b = un.unet_forward(lat, 10, text_emb, unet_bundle.tensors, UNetConfig()).np()
        assert np.array_equal(a, b)

    def test_zero_control_residuals_are_no_op(self, unet_bundle, text_emb):
        cfg = UNetConfig()
        lat = Rng(2).normal((4, 8, 8))
        plain = un.unet_forward(lat, 123, text_emb, unet_bundle.tensors, cfg).np()
        zeros = un.ControlResiduals(
            [Tensor.zeros((32, 8, 8)), Tensor.zeros((32, 8, 8)),
             Tensor.zeros((32, 4, 4)), Tensor.zeros((64, 4, 4))],
            Tensor.zeros((64, 4, 4)),
        )
        controlled = un.unet_forward(lat, 123, text_emb, unet_bundle.tensors, cfg,
                                     control_residuals=zeros).np()
        assert np.array_equal(plain, controlled)

    def test_residual_count_mismatch(self, unet_bundle, text_emb):
        bad = un.ControlResiduals([Tensor.zeros((32, 8, 8))], Tensor.zeros((64, 4, 4)))
        with pytest.raises(T.ShapeError, match="residual"):
            un.unet_forward(Rng(0).normal((4, 8, 8)), 1, text_emb,
                            unet_bundle.tensors, UNetConfig(), control_residuals=bad)

    def test_bad_latent_shapes(self, unet_bundle, text_emb):
        with pytest.raises(T.ShapeError):
            un.unet_forward(Rng(0).normal((3, 8, 8)), 1, text_emb, unet_bundle.tensors, UNetConfig())
        with pytest.raises(T.ShapeError):
            un.unet_forward(Rng(0).normal((4, 7, 8)), 1, text_emb, unet_bundle.tensors, UNetConfig())

    def test_negative_timestep(self, unet_bundle, text_emb):
        with pytest.raises(ValueError, match="timestep"):
            un.unet_forward(Rng(0).normal((4, 8, 8)), -1, text_emb, unet_bundle.tensors, UNetConfig())

    def test_out_param(self, unet_bundle, text_emb):
        lat = Rng(3).normal((4, 8, 8))
        out = Tensor.empty((4, 8, 8))
        got = un.unet_forward(lat, 7, text_emb, unet_bundle.tensors, UNetConfig(), out=out)
        assert got is out
        plain = un.unet_forward(lat, 7, text_emb, unet_bundle.tensors, UNetConfig()).np()
        assert np.array_equal(out.np(), plain)


class TestControlNet:
    def test_zero_init_produces_zero_residuals(self, control_bundle, text_emb):
        lat = Rng(5).normal((4, 8, 8))
        cond = Rng(6).uniform((1, 64, 64), 0, 1)
        res = un.controlnet_forward(lat, 500, text_emb, cond, control_bundle.tensors,
                                    ControlNetConfig())
        assert all(np.all(r.np() == 0.0) for r in res.skips)
        assert np.all(res.mid.np() == 0.0)

    def test_residual_shapes_match_injection_points(self, control_bundle, text_emb):
        lat = Rng(5).normal((4, 8, 8))
        cond = Rng(6).uniform((1, 64, 64), 0, 1)
        res = un.controlnet_forward(lat, 500, text_emb, cond, control_bundle.tensors,
                                    ControlNetConfig())
        assert [r.shape for r in res.skips] == [(32, 8, 8), (32, 8, 8), (32, 4, 4), (64, 4, 4)]
        assert res.mid.shape == (64, 4, 4)

    def test_condition_grid_mismatch(self, control_bundle, text_emb):
        lat = Rng(5).normal((4, 8, 8))
        cond = Rng(6).uniform((1, 32, 32), 0, 1)  # embeds to 4x4, latent is 8x8
        with pytest.raises(T.ShapeError):
            un.controlnet_forward(lat, 500, text_emb, cond, control_bundle.tensors,
                                  ControlNetConfig())


class TestVAE:
    def test_shapes_at_defaults(self, vae_bundle):
        cfg = VAEConfig()
        img = Rng(7).uniform((3, 64, 64), -1, 1)
        z = va.vae_encode(img, vae_bundle.tensors, cfg)
        assert z.shape == (4, 8, 8)
        rec = va.vae_decode(z, vae_bundle.tensors, cfg)
        assert rec.shape == img.shape

    def test_decode_clamps(self, vae_bundle):
        cfg = VAEConfig()
        z = T.scale(Rng(8).normal((4, 8, 8)), 500.0)
        rec = va.vae_decode(z, vae_bundle.tensors, cfg).np()
        assert rec.min() >= -1.0 and rec.max() <= 1.0

    def test_scaling_factor_scales_encoder_output(self, vae_bundle):
        img = Rng(9).uniform((3, 64, 64), -1, 1)
        scaled = va.vae_encode(img, vae_bundle.tensors, VAEConfig()).np()
        raw = va.vae_encode(img, vae_bundle.tensors, VAEConfig(scaling_factor=1.0)).np()
        assert np.std(scaled) == pytest.approx(np.std(raw) * 0.18215, rel=1e-5)

    def test_dimension_errors(self, vae_bundle):
        cfg = VAEConfig()
        with pytest.raises(T.ShapeError):
            va.vae_encode(Rng(0).uniform((3, 60, 64), -1, 1), vae_bundle.tensors, cfg)
        with pytest.raises(T.ShapeError):
            va.vae_encode(Rng(0).uniform((1, 64, 64), -1, 1), vae_bundle.tensors, cfg)
        with pytest.raises(T.ShapeError):
            va.vae_decode(Rng(0).normal((3, 8, 8)), vae_bundle.tensors, cfg)

    def test_power_of_two_factor_enforced(self):
        with pytest.raises(ValueError, match="power of 2"):
            VAEConfig(downsample_factor=6)


class TestBundles:
    def test_save_load_bit_identical(self, unet_bundle, tmp_path):
        save_bundle(unet_bundle, tmp_path / "unet.json")
        loaded = load_bundle(tmp_path / "unet.json")
        assert loaded.kind == "unet"
        assert loaded.config == unet_bundle.config
        assert set(loaded.tensors) == set(unet_bundle.tensors)
        for name in unet_bundle.tensors:
            assert np.array_equal(loaded.tensors[name].np(), unet_bundle.tensors[name].np()), name

    def test_corrupt_blob_byte_fails_checksum(self, vae_bundle, tmp_path):
        save_bundle(vae_bundle, tmp_path / "vae.json")
        blob = bytearray((tmp_path / "vae.bin").read_bytes())
        blob[100] ^= 0xFF
        (tmp_path / "vae.bin").write_bytes(bytes(blob))
        with pytest.raises(BundleError, match="checksum"):
            load_bundle(tmp_path / "vae.json")

    def test_init_seeded_deterministic(self):
        a = init_seeded(VAEConfig(), 42)
        b = init_seeded(VAEConfig(), 42)
        assert a.fingerprint == b.fingerprint
        for name in a.tensors:
            assert np.array_equal(a.tensors[name].np(), b.tensors[name].np())
        c = init_seeded(VAEConfig(), 43)
        assert c.fingerprint != a.fingerprint

    def test_param_count_is_manifest_sum(self, text_bundle, tmp_path):
        save_bundle(text_bundle, tmp_path / "te.json")
        manifest = json.loads((tmp_path / "te.json").read_text())
        total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
        assert text_bundle.param_count() == total

    def test_unknown_format_version(self, vae_bundle, tmp_path):
        save_bundle(vae_bundle, tmp_path / "vae.json")
        manifest = json.loads((tmp_path / "vae.json").read_text())
        manifest["format_version"] = 99
        (tmp_path / "vae.json").write_text(json.dumps(manifest))
        with pytest.raises(BundleError, match="format_version"):
            load_bundle(tmp_path / "vae.json")

    def test_shape_mismatch_names_tensor(self, vae_bundle, tmp_path):
        save_bundle(vae_bundle, tmp_path / "vae.json")
        manifest = json.loads((tmp_path / "vae.json").read_text())
        manifest["config"]["latent_channels"] = 8
        (tmp_path / "vae.json").write_text(json.dumps(manifest))
        with pytest.raises(BundleError, match="enc.out.w|dec.in.w"):
            load_bundle(tmp_path / "vae.json")

    def test_norm_and_bias_init(self, unet_bundle):
        assert np.all(unet_bundle.tensors["out.gn.g"].np() == 1.0)
        assert np.all(unet_bundle.tensors["out.gn.b"].np() == 0.0)
        assert np.all(unet_bundle.tensors["conv_in.b"].np() == 0.0)

    def test_controlnet_zero_convs_start_zero(self, control_bundle):
        for name, t in control_bundle.tensors.items():
            if name.startswith("zero_conv"):
                assert np.all(t.np() == 0.0), name

    def test_lora_bundle_roundtrip(self, tmp_path):
        cfg = LoRAConfig(r=4, alpha=4.0, targets=("mid.attn.wq", "mid.attn.wv"),
                         target_dims=((64, 64), (64, 64)))
        b = init_seeded(cfg, 9)
        assert set(b.tensors) == {"mid.attn.wq.A", "mid.attn.wq.B",
                                  "mid.attn.wv.A", "mid.attn.wv.B"}
        assert b.tensors["mid.attn.wq.A"].shape == (4, 64)
        assert b.tensors["mid.attn.wq.B"].shape == (64, 4)
        save_bundle(b, tmp_path / "lora.json")
        loaded = load_bundle(tmp_path / "lora.json")
        assert loaded.config == cfg
        for name in b.tensors:
            assert np.array_equal(loaded.tensors[name].np(), b.tensors[name].np())


class TestRegistry:
    def _registry(self):
        models = [
            reg.RegistryEntry("toy-general", "general", 64, 64, 669828,
                              adapters=["edge-control", "style-lora"],
                              files={"unet": "toy-general/unet.json"}),
            reg.RegistryEntry("toy-artist", "artist", 96, 64, 669828),
        ]
        adapters = [
            reg.AdapterEntry("style-lora", "lora", 24576, "adapters/style.json"),
            reg.AdapterEntry("edge-control", "controlnet", 349360, "adapters/edge.json"),
        ]
        return reg.Registry(models=models, adapters=adapters)

    def test_roundtrip(self, tmp_path):
        r = self._registry()
        reg.save_registry(r, tmp_path / "registry.json")
        loaded = reg.load_registry(tmp_path / "registry.json")
        assert [m.model_name for m in loaded.models] == ["toy-general", "toy-artist"]
        assert loaded.model("toy-general").adapters == ["edge-control", "style-lora"]
        assert loaded.adapter("style-lora").kind == "lora"

    def test_unknown_lookups(self):
        r = self._registry()
        with pytest.raises(KeyError, match="toy-general"):
            r.model("nope")
        with pytest.raises(KeyError, match="style-lora"):
            r.adapter("nope")

    def test_domain_labels(self):
        assert reg.domain_label("general") == "General purpose"
        assert reg.domain_label("custom-tag") == "custom-tag"

    def test_size_divisibility_enforced(self, tmp_path):
        r = self._registry()
        r.models[0].default_width = 60
        reg.save_registry(r, tmp_path / "registry.json")
        with pytest.raises(reg.RegistryError, match="divisible"):
            reg.load_registry(tmp_path / "registry.json")
