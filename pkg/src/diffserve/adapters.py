"""LoRA weight deltas and ControlNet control branches.

Both adapter kinds ship in the same manifest+blob format as base models.
LoRA is applied either dynamically (a params view that materializes
W + strength*(alpha/r)*B*A on access) or by folding into a new bundle;
both paths run the identical arithmetic, so their outputs match to the
bit, not just within tolerance. ControlNet residuals come from a copy of
the U-Net encoder behind zero-initialized taps, making a fresh adapter
provably inert.
"""
from __future__ import annotations

from . import tensor as T
from .models.bundle import ControlNetConfig, LoRAConfig, ModelBundle, UNetConfig
from .models.unet import ControlResiduals, controlnet_forward as _branch_forward
from .tensor import Tensor


class AdapterError(ValueError):
    pass


def attention_projection_targets(cfg: UNetConfig) -> list[str]:
    """The q/k/v/out projection weights of every cross-attention block."""
    prefixes = [f"down{lvl}.attn" for lvl in cfg.attn_resolutions]
    prefixes.append("mid.attn")
    prefixes.extend(f"up{lvl}.attn" for lvl in sorted(cfg.attn_resolutions, reverse=True))
    return [f"{p}.{w}" for p in prefixes for w in ("wq", "wk", "wv", "wo")]


class LoraAdapter:
    """Named low-rank deltas for a set of projection weights."""

    def __init__(self, name: str, r: int, alpha: float, deltas: dict[str, tuple[Tensor, Tensor]]):
        self.name = name
        self.r = r
        self.alpha = alpha
        self.deltas = deltas

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, name: str | None = None) -> "LoraAdapter":
        if bundle.kind != "lora":
            raise AdapterError(f"expected a lora bundle, got {bundle.kind!r}")
        cfg: LoRAConfig = bundle.config
        deltas = {}
        for target in cfg.targets:
            deltas[target] = (bundle.tensors[f"{target}.A"], bundle.tensors[f"{target}.B"])
        return cls(name or "lora", cfg.r, cfg.alpha, deltas)

    def validate_against(self, params: dict[str, Tensor]) -> None:
        for target, (a, b) in self.deltas.items():
            if target not in params:
                raise AdapterError(f"lora target {target!r} not present in base model")
            w = params[target]
            if b.shape != (w.shape[0], self.r) or a.shape != (self.r, w.shape[1]):
                raise AdapterError(
                    f"lora target {target!r}: base weight {w.shape} does not compose with "
                    f"B {b.shape} @ A {a.shape}"
                )


def lora_delta(a: Tensor, b: Tensor, alpha: float, r: int, strength: float) -> Tensor:
    """strength*(alpha/r)*B@A, computed as ((B@A)*(alpha/r))*strength.

    The two scalings stay separate so the delta is exactly linear in
    strength (delta(s) and s*delta(1) share every rounding step).
    """
    d = T.matmul(b, a)
    T.scale(d, alpha / r, out=d)
    return T.scale(d, strength, out=d)


def effective_weight(w: Tensor, a: Tensor, b: Tensor, alpha: float, r: int, strength: float) -> Tensor:
    d = lora_delta(a, b, alpha, r, strength)
    return T.add(w, d, out=d)


class _LoraParamsView:
    """Mapping over base params that rebuilds targeted weights on access.

    Rebuild-per-access is the dynamic path's honest cost: every forward
    pass pays the delta materialization that folding pays once.
    """

    def __init__(self, base: dict[str, Tensor], adapter: LoraAdapter, strength: float):
        self._base = base
        self._adapter = adapter
        self._strength = strength

    def __getitem__(self, name: str) -> Tensor:
        pair = self._adapter.deltas.get(name)
        if pair is None:
            return self._base[name]
        return effective_weight(self._base[name], pair[0], pair[1],
                                self._adapter.alpha, self._adapter.r, self._strength)

    def __contains__(self, name: str) -> bool:
        return name in self._base


def apply_lora(bundle: ModelBundle, adapter: LoraAdapter, strength: float = 1.0):
    """Params for adapted forward passes; the shared bundle is untouched.

    strength 0 short-circuits to the base tensors, making the no-op case
    bit-identical by construction.
    """
    if not (0.0 <= strength <= 1.0):
        raise AdapterError(f"lora strength must be in [0, 1], got {strength}")
    adapter.validate_against(bundle.tensors)
    if strength == 0.0:
        return bundle.tensors
    return _LoraParamsView(bundle.tensors, adapter, strength)


def fold_lora(bundle: ModelBundle, adapter: LoraAdapter, strength: float = 1.0) -> ModelBundle:
    """New bundle with the delta merged into each target weight."""
    if not (0.0 <= strength <= 1.0):
        raise AdapterError(f"lora strength must be in [0, 1], got {strength}")
    adapter.validate_against(bundle.tensors)
    tensors = dict(bundle.tensors)
    fingerprint = bundle.fingerprint
    if strength != 0.0:
        for target, (a, b) in adapter.deltas.items():
            tensors[target] = effective_weight(
                tensors[target], a, b, adapter.alpha, adapter.r, strength
            )
        fingerprint = f"{bundle.fingerprint}+{adapter.name}@{strength}"
    return ModelBundle(kind=bundle.kind, config=bundle.config, tensors=tensors,
                       fingerprint=fingerprint)


def unfold_lora(folded: ModelBundle, adapter: LoraAdapter, strength: float = 1.0) -> ModelBundle:
    """Subtract the delta back out, recovering the base weights."""
    tensors = dict(folded.tensors)
    if strength != 0.0:
        for target, (a, b) in adapter.deltas.items():
            if target not in tensors:
                raise AdapterError(f"lora target {target!r} not present in folded model")
            d = lora_delta(a, b, adapter.alpha, adapter.r, strength)
            tensors[target] = T.sub(tensors[target], d, out=d)
    base_print = folded.fingerprint.removesuffix(f"+{adapter.name}@{strength}")
    return ModelBundle(kind=folded.kind, config=folded.config, tensors=tensors,
                       fingerprint=base_print)


class ControlNetAdapter:
    """A control branch bound to its weights; produces unet residuals."""

    def __init__(self, name: str, bundle: ModelBundle):
        if bundle.kind != "controlnet":
            raise AdapterError(f"expected a controlnet bundle, got {bundle.kind!r}")
        self.name = name
        self.config: ControlNetConfig = bundle.config
        self.params = bundle.tensors

    def forward(self, latent: Tensor, timestep: int, text_emb: Tensor,
                condition: Tensor, ws: T.ConvWorkspace | None = None) -> ControlResiduals:
        return _branch_forward(latent, timestep, text_emb, condition, self.params, self.config,
                               ws=ws)


def conditioning_scale(residuals: ControlResiduals, s: float) -> ControlResiduals:
    """Scale every residual by s (the ControlNet strength knob)."""
    if s < 0:
        raise AdapterError(f"conditioning scale must be >= 0, got {s}")
    if s == 1.0:
        return residuals
    return ControlResiduals([T.scale(r, s) for r in residuals.skips],
                            T.scale(residuals.mid, s))
