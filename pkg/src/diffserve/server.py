"""HTTP front door: request schema, dispatch, task tracking, registry views.

One process serves one active model. Requests name pipelines ("t2i",
"i2i", "inpaint", "edit") and optionally adapters; images travel as
base64 PNG when use_base64 is set, otherwise as paths under the
configured output directory. A bounded worker pool admits at most
concurrency + queue_size requests at once; everything past that is
answered 503 immediately.

Validation splits by kind: schema problems (types, unknown fields,
numeric bounds) are 400 with the offending fields named, a pipeline
precondition on missing images is 422, and unknown model or adapter
names are 404.
"""

from __future__ import annotations

import base64
import contextlib
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .models.registry import Registry, RegistryEntry, domain_label
from .models.zoo import load_model, open_zoo
from .pipelines import (
    LoadedModel,
    PipelineParams,
    _check_params,
    from_png_base64,
    generate_images,
    gray_from_png_base64,
    gray_to_png_base64,
    to_png_base64,
)
from .preprocess import canny, depth_proxy, rgb_to_gray
from .tensor import Tensor

__all__ = ["ServerConfig", "GenerationRequest", "create_app"]


@dataclass
class ServerConfig:
    """Process-level serving knobs; request payloads never change these."""

    model: str | None = None
    models_dir: str | None = None
    output_dir: str = "outputs"
    concurrency: int = field(default_factory=lambda: os.cpu_count() or 2)
    queue_size: int = 16
    max_image_num: int = 4
    min_side: int = 8
    max_side: int = 512
    task_ttl_s: float = 600.0
    # testing hook: sleep instead of running the pipelines, returning
    # black images of the requested size
    stub_latency_ms: float | None = None


class GenerationRequest(BaseModel):
    """One generation call; unknown fields are rejected, not ignored.

    Fields that a pipeline does not use (init_image on t2i, say) are
    accepted and ignored so a client can keep one form for all four
    functions.
    """

    model_config = ConfigDict(extra="forbid")

    task_id: str
    prompt: str
    func_name: Literal["t2i", "i2i", "inpaint", "edit"]
    steps: int
    image_num: int
    width: int
    height: int
    use_base64: bool
    negative_prompt: str = ""
    seed: int | None = None
    init_image: str | None = None
    mask_image: str | None = None
    condition_image: str | None = None
    lora_name: str | None = None
    lora_strength: float = 1.0
    controlnet_name: str | None = None
    controlnet_scale: float = 1.0
    preprocessor: str = "none"
    scheduler: str = "ddim"
    guidance_scale: float = 7.5
    strength: float = 0.8


class PreprocessRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image: str
    preprocessor: Literal["canny", "depth", "none"]
    canny_low: float = 0.1
    canny_high: float = 0.3


class GenerationResult(BaseModel):
    task_id: str
    success: bool
    images: list[str]
    seed: int
    elapsed_ms: float
    error: str | None = None


class TaskView(BaseModel):
    task_id: str
    status: Literal["queued", "running", "done", "failed"]
    submitted_at: float
    finished_at: float | None = None
    result: GenerationResult | None = None


# ---------------------------------------------------------- worker pool


class WorkQueue:
    """Bounded admission in front of a thread pool.

    At most `workers` jobs run at once and at most `backlog` more wait;
    submit returns None once both are full. Counters drive /health.
    """

    def __init__(self, workers: int, backlog: int):
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._lock = threading.Lock()
        self._capacity = workers + backlog
        self._workers = workers
        self.in_flight = 0
        self.queued = 0

    def submit(self, fn, *args):
        with self._lock:
            if self.in_flight + self.queued >= self._capacity:
                return None
            self.queued += 1

        def run():
            with self._lock:
                self.queued -= 1
                self.in_flight += 1
            try:
                return fn(*args)
            finally:
                with self._lock:
                    self.in_flight -= 1

        return self._pool.submit(run)

    def shutdown(self):
        self._pool.shutdown(wait=False, cancel_futures=True)


# ----------------------------------------------------------- task store


@dataclass
class _TaskRecord:
    task_id: str
    status: str
    submitted_at: float
    finished_at: float | None = None
    result: dict | None = None
    expires_at: float | None = None


_TRANSITIONS = {"queued": {"running"}, "running": {"done", "failed"}}


class TaskStore:
    """Concurrent task registry with monotone status transitions."""

    def __init__(self, ttl_s: float):
        self._ttl = ttl_s
        self._lock = threading.Lock()
        self._records: dict[str, _TaskRecord] = {}

    def create(self) -> str:
        task_id = uuid.uuid4().hex
        with self._lock:
            self._records[task_id] = _TaskRecord(
                task_id=task_id, status="queued", submitted_at=time.time()
            )
        return task_id

    def _advance(self, task_id: str, status: str, result: dict | None = None):
        with self._lock:
            rec = self._records[task_id]
            if status not in _TRANSITIONS.get(rec.status, ()):
                raise RuntimeError(f"task {task_id}: illegal {rec.status} -> {status}")
            rec.status = status
            if status in ("done", "failed"):
                rec.finished_at = time.time()
                rec.result = result
                rec.expires_at = rec.finished_at + self._ttl

    def set_running(self, task_id: str):
        self._advance(task_id, "running")

    def finish(self, task_id: str, result: dict):
        self._advance(task_id, "done" if result["success"] else "failed", result)

    def drop(self, task_id: str):
        with self._lock:
            self._records.pop(task_id, None)

    def get(self, task_id: str) -> _TaskRecord | None:
        now = time.time()
        with self._lock:
            rec = self._records.get(task_id)
            if rec is None:
                return None
            if rec.expires_at is not None and now >= rec.expires_at:
                del self._records[task_id]
                return None
            return rec


# ----------------------------------------------------------- validation


def _bad(field_name: str, message: str):
    return HTTPException(status_code=400, detail=f"{field_name}: {message}")


def _decode_field(req: GenerationRequest, field_name: str, decoder):
    payload = getattr(req, field_name)
    if payload is None:
        return None
    try:
        return decoder(payload)
    except ValueError as exc:
        raise _bad(field_name, str(exc)) from None


def _require_images(req: GenerationRequest):
    needed = []
    if req.func_name in ("i2i", "edit", "inpaint") and req.init_image is None:
        needed.append("init_image")
    if req.func_name == "inpaint" and req.mask_image is None:
        needed.append("mask_image")
    if (
        req.controlnet_name is not None
        and req.condition_image is None
        and req.func_name != "edit"  # edit derives its condition from init_image
    ):
        needed.append("condition_image")
    if needed:
        raise HTTPException(
            status_code=422,
            detail=f"{req.func_name} requires {', '.join(needed)}",
        )


def _validate(model: LoadedModel, config: ServerConfig, req: GenerationRequest) -> PipelineParams:
    if not 1 <= req.image_num <= config.max_image_num:
        raise _bad("image_num", f"must be in [1, {config.max_image_num}], got {req.image_num}")
    for label, v in (("width", req.width), ("height", req.height)):
        if not config.min_side <= v <= config.max_side:
            raise _bad(label, f"must be in [{config.min_side}, {config.max_side}], got {v}")
    if req.seed is not None and req.seed < 0:
        raise _bad("seed", f"must be non-negative, got {req.seed}")
    if req.lora_name is not None and req.lora_name not in model.loras:
        known = ", ".join(sorted(model.loras)) or "none"
        raise HTTPException(404, f"no LoRA named {req.lora_name!r}; available: {known}")
    if req.controlnet_name is not None and req.controlnet_name not in model.controlnets:
        known = ", ".join(sorted(model.controlnets)) or "none"
        raise HTTPException(404, f"no ControlNet named {req.controlnet_name!r}; available: {known}")
    _require_images(req)
    if not 0.0 <= req.lora_strength <= 1.0:
        raise _bad("lora_strength", f"must be in [0, 1], got {req.lora_strength}")
    if req.controlnet_scale < 0.0:
        raise _bad("controlnet_scale", f"must be >= 0, got {req.controlnet_scale}")

    init = _decode_field(req, "init_image", from_png_base64)
    if init is not None and init.shape != (3, req.height, req.width):
        raise _bad("init_image", f"is {init.shape[2]}x{init.shape[1]}, request is for {req.width}x{req.height}")
    mask = _decode_field(req, "mask_image", gray_from_png_base64)
    if mask is not None and (mask.width, mask.height) != (req.width, req.height):
        raise _bad("mask_image", f"is {mask.width}x{mask.height}, request is for {req.width}x{req.height}")

    seed = req.seed if req.seed is not None else int.from_bytes(os.urandom(4), "big") >> 1
    params = PipelineParams(
        prompt=req.prompt,
        negative_prompt=req.negative_prompt,
        steps=req.steps,
        guidance_scale=req.guidance_scale,
        width=req.width,
        height=req.height,
        seed=seed,
        strength=req.strength,
        init_image=init,
        mask_image=mask,
        condition_image=_decode_field(req, "condition_image", gray_from_png_base64),
        scheduler=req.scheduler,
        lora_name=req.lora_name,
        lora_strength=req.lora_strength,
        controlnet_name=req.controlnet_name,
        controlnet_scale=req.controlnet_scale,
        preprocessor=req.preprocessor,
    )
    try:
        _check_params(model, params)
    except (ValueError, KeyError) as exc:
        # KeyError carries the scheduler registry's message in quotes
        raise HTTPException(400, str(exc).strip('"')) from None
    return params


# ------------------------------------------------------------ execution


def _execute(model: LoadedModel, config: ServerConfig, req: GenerationRequest,
             params: PipelineParams) -> dict:
    t0 = time.perf_counter()
    try:
        if config.stub_latency_ms is not None:
            time.sleep(config.stub_latency_ms / 1e3)
            images = [Tensor.zeros((3, req.height, req.width))] * req.image_num
        else:
            images = generate_images(model, params, req.func_name, req.image_num)
        if req.use_base64:
            payload = [to_png_base64(im) for im in images]
        else:
            payload = _write_outputs(config, images)
        return {
            "task_id": req.task_id,
            "success": True,
            "images": payload,
            "seed": params.seed,
            "elapsed_ms": (time.perf_counter() - t0) * 1e3,
        }
    except Exception as exc:
        return {
            "task_id": req.task_id,
            "success": False,
            "images": [],
            "seed": params.seed,
            "elapsed_ms": (time.perf_counter() - t0) * 1e3,
            "error": f"{type(exc).__name__}: {exc}",
        }


def _write_outputs(config: ServerConfig, images) -> list[str]:
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    batch = uuid.uuid4().hex[:12]
    paths = []
    for i, image in enumerate(images):
        name = f"{batch}_{i}.png"
        (out_dir / name).write_bytes(base64.b64decode(to_png_base64(image)))
        paths.append(str(out_dir / name))
    return paths


def _synthetic_registry(model: LoadedModel) -> Registry:
    entry = RegistryEntry(
        model_name=model.name,
        domain_tag="general",
        default_width=model.default_width,
        default_height=model.default_height,
        param_count=sum(
            b.param_count() for b in (model.text_encoder, model.unet, model.vae)
        ),
        adapters=sorted(list(model.loras) + list(model.controlnets)),
    )
    return Registry(models=[entry], adapters=[])


def _entry_view(registry: Registry, entry: RegistryEntry) -> dict:
    kinds = {a.name: a.kind for a in registry.adapters}
    return {
        "model_name": entry.model_name,
        "domain_tag": entry.domain_tag,
        "domain": domain_label(entry.domain_tag),
        "default_width": entry.default_width,
        "default_height": entry.default_height,
        "param_count": entry.param_count,
        "adapters": list(entry.adapters),
        # split by kind so clients can build the two pickers without
        # guessing from names
        "loras": [n for n in entry.adapters if kinds.get(n) == "lora"],
        "controlnets": [n for n in entry.adapters if kinds.get(n) == "controlnet"],
    }


# ------------------------------------------------------------------ app


def create_app(
    config: ServerConfig | None = None,
    model: LoadedModel | None = None,
    registry: Registry | None = None,
) -> FastAPI:
    """Application over one active model.

    Tests hand in a prebuilt model; the CLI passes a models_dir and the
    registry plus active model are loaded from it (seeding the toy zoo
    on first use).
    """
    config = config or ServerConfig()
    if registry is None and config.models_dir is not None:
        registry = open_zoo(config.models_dir)
    if model is None:
        if registry is None or config.models_dir is None:
            raise ValueError("create_app needs either a model or a models_dir")
        name = config.model or registry.models[0].model_name
        try:
            model = load_model(config.models_dir, registry, name)
        except KeyError as exc:
            raise ValueError(str(exc)) from None
    if registry is None:
        registry = _synthetic_registry(model)

    queue = WorkQueue(config.concurrency, config.queue_size)
    store = TaskStore(config.task_ttl_s)

    @contextlib.asynccontextmanager
    async def lifespan(app):
        yield
        queue.shutdown()

    app = FastAPI(title="diffserve", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.model = model
    app.state.queue = queue
    app.state.config = config

    @app.exception_handler(RequestValidationError)
    async def schema_error(request: Request, exc: RequestValidationError):
        unknown = sorted(
            str(err["loc"][-1]) for err in exc.errors() if err["type"] == "extra_forbidden"
        )
        messages = []
        if unknown:
            messages.append(f"unknown fields: {', '.join(unknown)}")
        for err in exc.errors():
            if err["type"] == "extra_forbidden":
                continue
            loc = ".".join(str(part) for part in err["loc"] if part != "body")
            messages.append(f"{loc}: {err['msg']}")
        return JSONResponse(status_code=400, content={"detail": "; ".join(messages)})

    @app.post("/generate", response_model=GenerationResult, response_model_exclude_none=True)
    def generate(req: GenerationRequest):
        params = _validate(model, config, req)
        future = queue.submit(_execute, model, config, req, params)
        if future is None:
            raise HTTPException(503, "queue full")
        result = future.result()
        if not result["success"]:
            raise HTTPException(500, result["error"])
        return result

    @app.post("/tasks")
    def submit_task(req: GenerationRequest):
        params = _validate(model, config, req)
        task_id = store.create()

        def job():
            store.set_running(task_id)
            store.finish(task_id, _execute(model, config, req, params))

        if queue.submit(job) is None:
            store.drop(task_id)
            raise HTTPException(503, "queue full")
        return {"task_id": task_id, "status": "queued"}

    @app.get("/tasks/{task_id}", response_model=TaskView, response_model_exclude_none=True)
    def get_task(task_id: str):
        rec = store.get(task_id)
        if rec is None:
            raise HTTPException(404, f"no task {task_id!r} (unknown or expired)")
        return TaskView(
            task_id=rec.task_id,
            status=rec.status,
            submitted_at=rec.submitted_at,
            finished_at=rec.finished_at,
            result=rec.result,
        )

    @app.get("/models")
    def list_models():
        return [_entry_view(registry, entry) for entry in registry.models]

    @app.get("/models/{name}")
    def get_model(name: str):
        try:
            return _entry_view(registry, registry.model(name))
        except KeyError as exc:
            raise HTTPException(404, str(exc)) from None

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "model": model.name,
            "queue_depth": queue.queued,
            "in_flight": queue.in_flight,
        }

    @app.post("/preprocess")
    def preprocess(req: PreprocessRequest):
        try:
            rgb = from_png_base64(req.image)
            gray = rgb_to_gray(rgb)
            if req.preprocessor == "canny":
                condition = canny(gray, req.canny_low, req.canny_high)
            elif req.preprocessor == "depth":
                condition = depth_proxy(gray)
            else:
                condition = gray
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from None
        return {
            "image": gray_to_png_base64(condition),
            "width": condition.width,
            "height": condition.height,
        }

    return app
