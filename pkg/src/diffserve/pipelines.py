"""Generation pipelines: text-to-image, image-to-image, inpainting, editing.

Each pipeline is a pure function of (model, params): the same inputs give
bit-identical outputs, which is what the reproducibility guarantees and
most of the test surface lean on. All four share one denoising driver;
they differ only in how the starting latent is produced and what happens
to the latent between scheduler steps.
"""

from __future__ import annotations

import base64
import binascii
import io
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, UnidentifiedImageError

from .adapters import ControlNetAdapter, LoraAdapter, apply_lora, conditioning_scale
from .models.bundle import ModelBundle
from .models.text_encoder import encode_text, tokenize
from .models.unet import unet_forward
from .models.vae import vae_decode, vae_encode
from .preprocess import GrayImage, canny, depth_proxy, rgb_to_gray
from .schedulers import (
    NoiseSchedule,
    SchedulerState,
    add_noise,
    get_scheduler,
    make_schedule,
    select_timesteps,
)
from .tensor import ConvWorkspace, Rng, ShapeError, Tensor

__all__ = [
    "LoadedModel",
    "PipelineParams",
    "PIPELINES",
    "cfg_combine",
    "text_to_image",
    "image_to_image",
    "inpaint",
    "edit",
    "generate_images",
    "to_png_base64",
    "from_png_base64",
    "gray_to_png_base64",
    "gray_from_png_base64",
]

_PREPROCESSORS = ("canny", "depth", "none")


@dataclass
class PipelineParams:
    """Everything a single generation depends on, seed included."""

    prompt: str = ""
    negative_prompt: str = ""
    steps: int = 25
    guidance_scale: float = 7.5
    width: int | None = None
    height: int | None = None
    seed: int = 0
    strength: float = 0.8
    init_image: Tensor | None = None
    mask_image: GrayImage | None = None
    scheduler: str = "ddim"
    eta: float = 0.0
    lora_name: str | None = None
    lora_strength: float = 1.0
    controlnet_name: str | None = None
    controlnet_scale: float = 1.0
    condition_image: GrayImage | None = None
    preprocessor: str = "none"
    canny_low: float = 0.1
    canny_high: float = 0.3


@dataclass
class LoadedModel:
    """A model's bundles plus the adapters available to it.

    Shared read-only between concurrent generations; every run owns its
    own SchedulerState, Rng, and working tensors. The optional fields are
    execution knobs, not request surface: `schedule` caches the forward
    process constants, `embedding_cache` memoizes prompt embeddings, and
    `reuse_buffers` routes scheduler math through preallocated workspace
    (results are bit-identical either way).
    """

    name: str
    text_encoder: ModelBundle
    unet: ModelBundle
    vae: ModelBundle
    default_width: int = 64
    default_height: int = 64
    loras: dict[str, LoraAdapter] = field(default_factory=dict)
    controlnets: dict[str, ControlNetAdapter] = field(default_factory=dict)
    schedule: NoiseSchedule | None = None
    embedding_cache: dict | None = None
    reuse_buffers: bool = True

    def lora(self, name: str) -> LoraAdapter:
        try:
            return self.loras[name]
        except KeyError:
            known = ", ".join(sorted(self.loras)) or "none"
            raise KeyError(f"no LoRA named {name!r} for model {self.name!r}; known: {known}") from None

    def controlnet(self, name: str) -> ControlNetAdapter:
        try:
            return self.controlnets[name]
        except KeyError:
            known = ", ".join(sorted(self.controlnets)) or "none"
            raise KeyError(
                f"no ControlNet named {name!r} for model {self.name!r}; known: {known}"
            ) from None


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, s: float, out: Tensor | None = None) -> Tensor:
    """Classifier-free guidance: eps_uncond + s * (eps_cond - eps_uncond).

    s=0 and s=1 return exact copies of the respective branch rather than
    going through the arithmetic, so those settings are bitwise equal to
    a single-branch run.

    `out` may alias eps_cond (every write at an index reads only that
    index first) but must not alias eps_uncond, which is re-read after
    the difference is written.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"guidance branches disagree: {eps_uncond.shape} vs {eps_cond.shape}")
    if out is None:
        out = Tensor.empty(eps_uncond.shape)
    if s == 1.0:
        out.copy_from(eps_cond)
        return out
    if s == 0.0:
        out.copy_from(eps_uncond)
        return out
    o = out.np()
    np.subtract(eps_cond.np(), eps_uncond.np(), out=o)
    o *= np.float32(s)
    o += eps_uncond.np()
    return out


# ------------------------------------------------------------ validation


def _resolve_size(model: LoadedModel, params: PipelineParams) -> tuple[int, int]:
    width = params.width if params.width is not None else model.default_width
    height = params.height if params.height is not None else model.default_height
    factor = model.vae.config.downsample_factor
    for label, v in (("width", width), ("height", height)):
        if v <= 0 or v % factor != 0:
            raise ValueError(f"{label} must be a positive multiple of {factor}, got {v}")
    return width, height


def _check_params(model: LoadedModel, params: PipelineParams) -> tuple[int, int]:
    if params.steps < 1:
        raise ValueError(f"steps must be >= 1, got {params.steps}")
    if not 0.0 <= params.strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {params.strength}")
    if params.seed < 0:
        raise ValueError(f"seed must be non-negative, got {params.seed}")
    if params.eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {params.eta}")
    if params.preprocessor not in _PREPROCESSORS:
        raise ValueError(
            f"unknown preprocessor {params.preprocessor!r}; expected one of {_PREPROCESSORS}"
        )
    get_scheduler(params.scheduler)
    return _resolve_size(model, params)


def _require_init(params: PipelineParams, width: int, height: int) -> Tensor:
    init = params.init_image
    if init is None:
        raise ValueError("this pipeline requires init_image")
    if init.shape != (3, height, width):
        raise ShapeError(f"init_image is {init.shape}, request is for (3, {height}, {width})")
    return init


# ------------------------------------------------------------ internals


def _get_schedule(model: LoadedModel) -> NoiseSchedule:
    if model.schedule is not None:
        return model.schedule
    return make_schedule()


def _encode_prompt(model: LoadedModel, text: str) -> Tensor:
    cache = model.embedding_cache
    if cache is not None and text in cache:
        return cache[text]
    cfg = model.text_encoder.config
    emb = encode_text(tokenize(text, cfg.max_tokens), model.text_encoder.tensors, cfg)
    if cache is not None:
        cache[text] = emb
    return emb


def _unet_params(model: LoadedModel, params: PipelineParams):
    if params.lora_name is None:
        return model.unet.tensors
    adapter = model.lora(params.lora_name)
    return apply_lora(model.unet, adapter, params.lora_strength)


@dataclass
class _ControlRunner:
    """A ControlNet plus its prepared condition and residual scale."""

    adapter: ControlNetAdapter
    condition: Tensor
    scale: float

    def residuals(self, latent: Tensor, t: int, text_emb: Tensor, ws=None):
        res = self.adapter.forward(latent, t, text_emb, self.condition, ws=ws)
        return conditioning_scale(res, self.scale)


def _prepare_control(
    model: LoadedModel, params: PipelineParams, condition: GrayImage | None,
) -> _ControlRunner | None:
    if params.controlnet_name is None:
        return None
    if condition is None:
        raise ValueError("a ControlNet was requested but no condition image is available")
    adapter = model.controlnet(params.controlnet_name)
    if params.controlnet_scale < 0.0:
        raise ValueError(f"controlnet_scale must be >= 0, got {params.controlnet_scale}")
    return _ControlRunner(adapter, condition.as_tensor(), params.controlnet_scale)


def _derive_condition(params: PipelineParams, init: Tensor) -> GrayImage:
    gray = rgb_to_gray(init)
    if params.preprocessor == "canny":
        return canny(gray, params.canny_low, params.canny_high)
    if params.preprocessor == "depth":
        return depth_proxy(gray)
    return gray


def _latent_keep_mask(mask: GrayImage, width: int, height: int, factor: int) -> np.ndarray:
    """Latent cells safe to overwrite with the known-region latent.

    A cell counts as regenerate if any pixel in its factor x factor block
    is marked for regeneration; only cells fully inside the known region
    are pinned back. Returns a boolean (H/f, W/f) array, True = known.
    """
    binary = mask.data >= 0.5
    if binary.shape != (height, width):
        raise ShapeError(f"mask_image is {binary.shape}, request is for ({height}, {width})")
    blocks = binary.reshape(height // factor, factor, width // factor, factor)
    return ~blocks.any(axis=(1, 3))


def _denoise(
    model: LoadedModel,
    params: PipelineParams,
    x: Tensor,
    timesteps: list[int],
    rng: Rng,
    emb_u: Tensor,
    emb_c: Tensor,
    control: _ControlRunner | None = None,
    known: tuple[Tensor, np.ndarray] | None = None,
) -> Tensor:
    """Run the guidance loop over `timesteps`, returning the final latent.

    `known` carries (clean latent, keep-mask); after every scheduler step
    the kept cells are reset to the clean latent noised to the level the
    walker has just reached, so the generated region stays consistent
    with the untouched one at matching noise levels.
    """
    schedule = _get_schedule(model)
    state = SchedulerState(schedule, timesteps, eta=params.eta)
    step_fn = get_scheduler(params.scheduler)
    unet_p = _unet_params(model, params)
    unet_cfg = model.unet.config

    # Two latent-sized buffers cover the whole loop: the guided eps can
    # overwrite the conditional branch (elementwise, no cross-index reads)
    # and the step can scratch over the unconditional one, whose raw values
    # are dead once the branches are combined. The conv workspace lives
    # for the generation and is shared by every U-Net and control call.
    eps_u = eps_c = ws = None
    if model.reuse_buffers:
        eps_u = Tensor.empty(x.shape)
        eps_c = Tensor.empty(x.shape)
        ws = ConvWorkspace()

    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        res_u = res_c = None
        if control is not None:
            res_u = control.residuals(x, t, emb_u, ws)
            res_c = control.residuals(x, t, emb_c, ws)
        e_u = unet_forward(x, t, emb_u, unet_p, unet_cfg, control_residuals=res_u, out=eps_u, ws=ws)
        e_c = unet_forward(x, t, emb_c, unet_p, unet_cfg, control_residuals=res_c, out=eps_c, ws=ws)
        eps = cfg_combine(e_u, e_c, params.guidance_scale, out=eps_c)
        x = step_fn(x, eps, t, t_prev, state, rng, out=x if model.reuse_buffers else None, tmp=eps_u)
        state.step_index += 1

        if known is not None:
            clean, keep = known
            if keep.any():
                if t_prev >= 0:
                    noised = add_noise(clean, rng.normal(clean.shape), t_prev, schedule)
                else:
                    noised = clean
                xn = x.np()
                xn[:] = np.where(keep[np.newaxis], noised.np(), xn)
    return x


def _latent_shape(model: LoadedModel, width: int, height: int) -> tuple[int, int, int]:
    factor = model.vae.config.downsample_factor
    return (model.vae.config.latent_channels, height // factor, width // factor)


def _decode(model: LoadedModel, latent: Tensor) -> Tensor:
    return vae_decode(latent, model.vae.tensors, model.vae.config)


# ------------------------------------------------------------- pipelines


def text_to_image(model: LoadedModel, params: PipelineParams) -> Tensor:
    """Full denoise from a seeded gaussian latent. Output (3, H, W) in [-1, 1]."""
    width, height = _check_params(model, params)
    control = _prepare_control(model, params, params.condition_image)
    rng = Rng(params.seed)
    x = rng.normal(_latent_shape(model, width, height))
    timesteps = select_timesteps(_get_schedule(model).T, params.steps)
    emb_u = _encode_prompt(model, params.negative_prompt)
    emb_c = _encode_prompt(model, params.prompt)
    x = _denoise(model, params, x, timesteps, rng, emb_u, emb_c, control=control)
    return _decode(model, x)


def _executed_steps(strength: float, steps: int) -> int:
    return round(strength * steps)


def image_to_image(model: LoadedModel, params: PipelineParams) -> Tensor:
    """Denoise an encoded init image over the tail of the schedule.

    strength scales how much of the schedule runs: round(strength * steps)
    iterations. Zero strength never touches the U-Net and reduces to a VAE
    round trip of the init image.
    """
    width, height = _check_params(model, params)
    init = _require_init(params, width, height)
    control = _prepare_control(model, params, params.condition_image)

    latent0 = vae_encode(init, model.vae.tensors, model.vae.config)
    n_exec = _executed_steps(params.strength, params.steps)
    if n_exec == 0:
        return _decode(model, latent0)

    schedule = _get_schedule(model)
    timesteps = select_timesteps(schedule.T, params.steps)[params.steps - n_exec :]
    rng = Rng(params.seed)
    x = add_noise(latent0, rng.normal(latent0.shape), timesteps[0], schedule)
    emb_u = _encode_prompt(model, params.negative_prompt)
    emb_c = _encode_prompt(model, params.prompt)
    x = _denoise(model, params, x, timesteps, rng, emb_u, emb_c, control=control)
    return _decode(model, x)


def inpaint(model: LoadedModel, params: PipelineParams) -> Tensor:
    """Regenerate the mask-1 region, keeping mask-0 pixels bit-exact.

    Runs the full schedule like text-to-image while pinning known-region
    latent cells after every step, then composites in pixel space so the
    kept region is exactly the init image.
    """
    width, height = _check_params(model, params)
    init = _require_init(params, width, height)
    if params.mask_image is None:
        raise ValueError("inpaint requires mask_image")
    control = _prepare_control(model, params, params.condition_image)

    factor = model.vae.config.downsample_factor
    keep = _latent_keep_mask(params.mask_image, width, height, factor)
    latent0 = vae_encode(init, model.vae.tensors, model.vae.config)

    rng = Rng(params.seed)
    x = rng.normal(_latent_shape(model, width, height))
    timesteps = select_timesteps(_get_schedule(model).T, params.steps)
    emb_u = _encode_prompt(model, params.negative_prompt)
    emb_c = _encode_prompt(model, params.prompt)
    x = _denoise(model, params, x, timesteps, rng, emb_u, emb_c, control=control, known=(latent0, keep))
    generated = _decode(model, x)

    regen = (params.mask_image.data >= 0.5)[np.newaxis]
    out = np.where(regen, generated.np(), init.np())
    return Tensor.from_numpy(out)


def edit(model: LoadedModel, params: PipelineParams) -> Tensor:
    """Prompt-guided rework of an existing image.

    Without a ControlNet this is exactly image_to_image. With one, the
    condition is derived from the init image by the selected preprocessor
    and the control branch constrains the denoise.
    """
    if params.controlnet_name is None:
        return image_to_image(model, params)
    width, height = _check_params(model, params)
    init = _require_init(params, width, height)
    condition = _derive_condition(params, init)
    return image_to_image(model, replace(params, condition_image=condition))


PIPELINES = {
    "t2i": text_to_image,
    "i2i": image_to_image,
    "inpaint": inpaint,
    "edit": edit,
}


def generate_images(model: LoadedModel, params: PipelineParams, func: str, image_num: int = 1) -> list[Tensor]:
    """Run a pipeline image_num times with seeds seed, seed+1, ..."""
    try:
        pipeline = PIPELINES[func]
    except KeyError:
        known = ", ".join(sorted(PIPELINES))
        raise KeyError(f"no pipeline named {func!r}; known pipelines: {known}") from None
    if image_num < 1:
        raise ValueError(f"image_num must be >= 1, got {image_num}")
    return [pipeline(model, replace(params, seed=params.seed + i)) for i in range(image_num)]


# ------------------------------------------------------------- PNG codec


def to_png_base64(image: Tensor) -> str:
    """8-bit RGB PNG of a (3, H, W) tensor in [-1, 1], base64-encoded."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {image.shape}")
    arr = image.np().astype(np.float64)
    pixels = np.rint(np.clip((arr + 1.0) * 127.5, 0.0, 255.0)).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def from_png_base64(data: str) -> Tensor:
    """Decode a base64 PNG back to a (3, H, W) float tensor in [-1, 1]."""
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"invalid base64 payload: {exc}") from None
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except UnidentifiedImageError:
        raise ValueError("payload is not a decodable image") from None
    if img.format != "PNG":
        raise ValueError(f"expected a PNG payload, got {img.format}")
    if img.mode != "RGB":
        raise ValueError(f"expected an RGB PNG, got mode {img.mode}")
    pixels = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    return Tensor.from_numpy((pixels / 127.5 - 1.0).astype(np.float32))


def gray_to_png_base64(img: GrayImage) -> str:
    """8-bit grayscale PNG of a single-channel [0, 1] image."""
    pixels = np.rint(img.data * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def gray_from_png_base64(data: str) -> GrayImage:
    """Decode a base64 PNG to a single-channel [0, 1] image.

    Color payloads are converted to luma; the webui's {0, 255} mask
    export survives the round trip exactly.
    """
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"invalid base64 payload: {exc}") from None
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except UnidentifiedImageError:
        raise ValueError("payload is not a decodable image") from None
    if img.format != "PNG":
        raise ValueError(f"expected a PNG payload, got {img.format}")
    pixels = np.asarray(img.convert("L"), dtype=np.float64)
    return GrayImage(pixels / 255.0)
