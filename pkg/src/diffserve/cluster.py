"""Router mode: one front door fanning out to a pool of worker servers.

Workers are ordinary single-node servers; the router exposes the same
public API, picks the least-loaded healthy worker per request, probes
worker health on an interval, and scales the pool toward demand under
a cooldown. The policy pieces (worker selection, desired size,
reconcile) are pure functions over snapshots so they are testable
without any sockets; the Router object owns the mutable table and the
background loop.
"""

from __future__ import annotations

import json
import math
import subprocess
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field, replace

import httpx
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from starlette.concurrency import run_in_threadpool

__all__ = [
    "ScalingPolicy",
    "WorkerRecord",
    "CooldownState",
    "ScaleActions",
    "NoHealthyWorkers",
    "RouterConfig",
    "pick_worker",
    "desired_workers",
    "reconcile",
    "Router",
    "SubprocessLauncher",
    "create_router_app",
]


class NoHealthyWorkers(RuntimeError):
    """Every worker is unhealthy or draining."""


@dataclass(frozen=True)
class ScalingPolicy:
    """How many workers the demand level asks for, and how fast to move."""

    target_per_worker: int = 2
    min_workers: int = 1
    max_workers: int = 4
    cooldown_s: float = 10.0

    def __post_init__(self):
        if not 1 <= self.min_workers <= self.max_workers:
            raise ValueError(
                f"need 1 <= min_workers <= max_workers, got [{self.min_workers}, {self.max_workers}]"
            )
        if self.target_per_worker < 1:
            raise ValueError(f"target_per_worker must be >= 1, got {self.target_per_worker}")


@dataclass
class WorkerRecord:
    worker_id: int
    address: str
    status: str = "healthy"  # healthy | unhealthy | draining
    in_flight: int = 0
    queue_depth: int = 0
    last_heartbeat: float = 0.0
    total_completed: int = 0
    consecutive_failures: int = 0


@dataclass
class CooldownState:
    last_scale_at: float | None = None


@dataclass(frozen=True)
class ScaleActions:
    spawn: int = 0
    drain: tuple[int, ...] = ()


def pick_worker(records, exclude=frozenset()) -> int:
    """Healthy worker with minimum in_flight; ties go to the lowest id."""
    candidates = [
        r for r in records if r.status == "healthy" and r.worker_id not in exclude
    ]
    if not candidates:
        raise NoHealthyWorkers("no healthy workers available")
    return min(candidates, key=lambda r: (r.in_flight, r.worker_id)).worker_id


def desired_workers(queue_depth: int, in_flight_total: int, policy: ScalingPolicy) -> int:
    """ceil(demand / target_per_worker), clamped to the policy bounds."""
    wanted = math.ceil((queue_depth + in_flight_total) / policy.target_per_worker)
    return max(policy.min_workers, min(policy.max_workers, wanted))


def reconcile(records, desired: int, policy: ScalingPolicy, state: CooldownState,
              now: float | None = None) -> ScaleActions:
    """Actions moving the pool toward `desired`, one direction per window.

    Draining workers are already on their way out and do not count as
    current capacity. Scale-down picks the least-loaded workers, newest
    first on ties, so long-lived workers keep their warm caches.
    """
    now = time.monotonic() if now is None else now
    active = [r for r in records if r.status != "draining"]
    if len(active) == desired:
        return ScaleActions()
    if state.last_scale_at is not None and now - state.last_scale_at < policy.cooldown_s:
        return ScaleActions()
    state.last_scale_at = now
    if desired > len(active):
        return ScaleActions(spawn=desired - len(active))
    victims = sorted(active, key=lambda r: (r.in_flight, -r.worker_id))
    return ScaleActions(drain=tuple(r.worker_id for r in victims[: len(active) - desired]))


# ---------------------------------------------------------------- router


@dataclass
class RouterConfig:
    policy: ScalingPolicy = field(default_factory=ScalingPolicy)
    health_interval_s: float = 1.0
    probe_timeout_s: float = 2.0
    request_timeout_s: float = 120.0
    unhealthy_after: int = 2  # consecutive probe failures


class Router:
    """Worker table, dispatch, health loop, and autoscaling in one place.

    `launcher` supplies new workers: its spawn() must return an object
    with `address`, `alive()` and `terminate()`. Thread-safe; every
    table mutation happens under one lock, policy evaluation works on
    snapshots.
    """

    def __init__(self, launcher, config: RouterConfig | None = None):
        self.config = config or RouterConfig()
        self._launcher = launcher
        self._lock = threading.Lock()
        self._workers: dict[int, WorkerRecord] = {}
        self._handles: dict[int, object] = {}
        self._next_id = 0
        self._cooldown = CooldownState()
        self._last_desired = self.config.policy.min_workers
        self._task_homes: dict[str, int] = {}
        self._client = httpx.Client(timeout=self.config.request_timeout_s)
        self._probe = httpx.Client(timeout=self.config.probe_timeout_s)
        self._stop = threading.Event()
        self._stopped = False
        self._loop_thread: threading.Thread | None = None

    # -- lifecycle

    def start(self):
        for _ in range(self.config.policy.min_workers):
            self._spawn()
        self._loop_thread = threading.Thread(target=self._loop, daemon=True)
        self._loop_thread.start()

    def stop(self):
        if self._stopped:
            return
        self._stopped = True
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout=5.0)
        with self._lock:
            handles = list(self._handles.values())
            self._handles.clear()
            self._workers.clear()
        for handle in handles:
            handle.terminate()
        self._client.close()
        self._probe.close()

    def _spawn(self):
        handle = self._launcher.spawn()
        with self._lock:
            worker_id = self._next_id
            self._next_id += 1
            self._workers[worker_id] = WorkerRecord(
                worker_id=worker_id, address=handle.address, last_heartbeat=time.monotonic()
            )
            self._handles[worker_id] = handle
        return worker_id

    # -- dispatch bookkeeping

    def _checkout(self, exclude) -> tuple[int, str]:
        with self._lock:
            worker_id = pick_worker(self._workers.values(), exclude)
            rec = self._workers[worker_id]
            rec.in_flight += 1
            return worker_id, rec.address

    def _checkin(self, worker_id: int, completed: bool):
        with self._lock:
            rec = self._workers.get(worker_id)
            if rec is None:
                return
            rec.in_flight = max(0, rec.in_flight - 1)
            if completed:
                rec.total_completed += 1

    def _note_dead(self, worker_id: int):
        with self._lock:
            rec = self._workers.get(worker_id)
            if rec is None:
                return
            rec.consecutive_failures += 1
            if rec.consecutive_failures >= self.config.unhealthy_after:
                if rec.status != "draining":
                    rec.status = "unhealthy"

    # -- request forwarding (bodies pass through as raw bytes so workers
    #    see exactly what the client sent)

    def forward_generation(self, path: str, content: bytes) -> tuple[int, bytes]:
        """POST `content` to a worker, retrying once if the pick is dead."""
        tried: set[int] = set()
        for _ in range(2):
            try:
                worker_id, address = self._checkout(tried)
            except NoHealthyWorkers:
                return 503, _error_body("no healthy workers")
            tried.add(worker_id)
            try:
                resp = self._client.post(
                    f"{address}{path}", content=content,
                    headers={"content-type": "application/json"},
                )
            except httpx.TransportError:
                self._note_dead(worker_id)
                self._checkin(worker_id, completed=False)
                continue
            self._checkin(worker_id, completed=resp.status_code == 200)
            if path == "/tasks" and resp.status_code == 200:
                with self._lock:
                    self._task_homes[resp.json()["task_id"]] = worker_id
            return resp.status_code, resp.content
        return 502, _error_body("dispatch failed twice; giving up on this request")

    def forward_get(self, path: str) -> tuple[int, bytes]:
        with self._lock:
            try:
                worker_id = pick_worker(self._workers.values())
            except NoHealthyWorkers:
                return 503, _error_body("no healthy workers")
            address = self._workers[worker_id].address
        try:
            resp = self._probe.get(f"{address}{path}")
        except httpx.TransportError:
            self._note_dead(worker_id)
            return 502, _error_body("worker unreachable")
        return resp.status_code, resp.content

    def task_status(self, task_id: str) -> tuple[int, bytes]:
        with self._lock:
            worker_id = self._task_homes.get(task_id)
            rec = self._workers.get(worker_id) if worker_id is not None else None
        if rec is None:
            return 404, _error_body(
                f"no task {task_id!r} (unknown, expired, or its worker is gone)"
            )
        try:
            resp = self._client.get(f"{rec.address}/tasks/{task_id}")
        except httpx.TransportError:
            self._note_dead(worker_id)
            return 502, _error_body("worker unreachable")
        return resp.status_code, resp.content

    # -- periodic work

    def _loop(self):
        while not self._stop.wait(self.config.health_interval_s):
            self.health_tick()
            self.autoscale_tick()
            self.reap_tick()

    def health_tick(self):
        """Probe every worker's /health and resync load counters."""
        with self._lock:
            targets = [(r.worker_id, r.address) for r in self._workers.values()]
        for worker_id, address in targets:
            ok = False
            reported = None
            try:
                resp = self._probe.get(f"{address}/health")
                if resp.status_code == 200:
                    ok = True
                    reported = resp.json()
            except httpx.TransportError:
                pass
            with self._lock:
                rec = self._workers.get(worker_id)
                if rec is None:
                    continue
                if ok:
                    rec.consecutive_failures = 0
                    rec.last_heartbeat = time.monotonic()
                    rec.in_flight = int(reported.get("in_flight", rec.in_flight))
                    rec.queue_depth = int(reported.get("queue_depth", 0))
                    if rec.status == "unhealthy":
                        rec.status = "healthy"
                else:
                    rec.consecutive_failures += 1
                    if rec.consecutive_failures >= self.config.unhealthy_after:
                        if rec.status != "draining":
                            rec.status = "unhealthy"

    def autoscale_tick(self):
        with self._lock:
            records = [replace(r) for r in self._workers.values()]
            queue_depth = sum(r.queue_depth for r in records if r.status == "healthy")
            in_flight = sum(r.in_flight for r in records if r.status == "healthy")
        desired = desired_workers(queue_depth, in_flight, self.config.policy)
        self._last_desired = desired
        actions = reconcile(records, desired, self.config.policy, self._cooldown)
        for _ in range(actions.spawn):
            self._spawn()
        if actions.drain:
            with self._lock:
                for worker_id in actions.drain:
                    rec = self._workers.get(worker_id)
                    if rec is not None:
                        rec.status = "draining"

    def reap_tick(self):
        """Remove drained workers and workers whose process has died."""
        to_remove = []
        with self._lock:
            for worker_id, rec in self._workers.items():
                handle = self._handles[worker_id]
                if not handle.alive():
                    to_remove.append(worker_id)
                elif rec.status == "draining" and rec.in_flight == 0 and rec.queue_depth == 0:
                    to_remove.append(worker_id)
            removed = [(wid, self._handles.pop(wid)) for wid in to_remove]
            for worker_id in to_remove:
                del self._workers[worker_id]
                self._task_homes = {
                    tid: wid for tid, wid in self._task_homes.items() if wid != worker_id
                }
        for _, handle in removed:
            handle.terminate()

    # -- views

    def snapshot(self) -> dict:
        with self._lock:
            workers = [
                {
                    "worker_id": r.worker_id,
                    "address": r.address,
                    "status": r.status,
                    "in_flight": r.in_flight,
                    "queue_depth": r.queue_depth,
                    "total_completed": r.total_completed,
                }
                for r in self._workers.values()
            ]
        return {
            "workers": workers,
            "desired": self._last_desired,
            "policy": {
                "target_per_worker": self.config.policy.target_per_worker,
                "min_workers": self.config.policy.min_workers,
                "max_workers": self.config.policy.max_workers,
                "cooldown_s": self.config.policy.cooldown_s,
            },
        }

    def aggregate_health(self) -> dict:
        with self._lock:
            healthy = [r for r in self._workers.values() if r.status == "healthy"]
            queue_depth = sum(r.queue_depth for r in healthy)
            in_flight = sum(r.in_flight for r in healthy)
        return {
            "status": "ok" if healthy else "degraded",
            "workers": len(healthy),
            "queue_depth": queue_depth,
            "in_flight": in_flight,
        }


class SubprocessLauncher:
    """Spawns worker processes from a command template.

    The template receives the chosen port via `{port}`. Ports walk the
    configured range, skipping ones already handed out; spawn blocks
    until the worker's /health answers so the router never dispatches
    into a half-started process.
    """

    def __init__(self, command: list[str], port_start: int, port_end: int,
                 startup_timeout_s: float = 30.0):
        self._command = command
        self._ports = iter(range(port_start, port_end + 1))
        self._timeout = startup_timeout_s

    def spawn(self):
        try:
            port = next(self._ports)
        except StopIteration:
            raise RuntimeError("worker port range exhausted") from None
        argv = [arg.format(port=port) for arg in self._command]
        proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        address = f"http://127.0.0.1:{port}"
        deadline = time.monotonic() + self._timeout
        with httpx.Client(timeout=1.0) as probe:
            while time.monotonic() < deadline:
                if proc.poll() is not None:
                    raise RuntimeError(f"worker on port {port} exited during startup")
                try:
                    if probe.get(f"{address}/health").status_code == 200:
                        return _ProcessHandle(proc, address)
                except httpx.TransportError:
                    time.sleep(0.1)
        proc.terminate()
        raise RuntimeError(f"worker on port {port} never became healthy")


class _ProcessHandle:
    def __init__(self, proc: subprocess.Popen, address: str):
        self._proc = proc
        self.address = address

    def alive(self) -> bool:
        return self._proc.poll() is None

    def terminate(self):
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def _error_body(detail: str) -> bytes:
    return json.dumps({"detail": detail}).encode()


def create_router_app(router: Router) -> FastAPI:
    """The public API again, implemented by forwarding to workers.

    Forwards run on the threadpool (the worker round-trip blocks), so
    concurrent requests at the front door fan out instead of queueing
    behind one another on the event loop. App shutdown stops the router
    and with it the workers it spawned; a plain SIGTERM to the serving
    process is enough to take the whole pool down.
    """

    @asynccontextmanager
    async def lifespan(app):
        yield
        router.stop()

    app = FastAPI(title="diffserve-router", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.router = router

    def _passthrough(status: int, content: bytes) -> Response:
        return Response(content=content, status_code=status, media_type="application/json")

    async def _forward_post(path: str, request: Request) -> Response:
        raw = await request.body()
        status, content = await run_in_threadpool(router.forward_generation, path, raw)
        return _passthrough(status, content)

    @app.post("/generate")
    async def generate(request: Request):
        return await _forward_post("/generate", request)

    @app.post("/tasks")
    async def submit_task(request: Request):
        return await _forward_post("/tasks", request)

    @app.post("/preprocess")
    async def preprocess(request: Request):
        return await _forward_post("/preprocess", request)

    @app.get("/tasks/{task_id}")
    def get_task(task_id: str):
        return _passthrough(*router.task_status(task_id))

    @app.get("/models")
    def list_models():
        return _passthrough(*router.forward_get("/models"))

    @app.get("/models/{name}")
    def get_model(name: str):
        return _passthrough(*router.forward_get(f"/models/{name}"))

    @app.get("/health")
    def health():
        return router.aggregate_health()

    @app.get("/cluster")
    def cluster():
        return router.snapshot()

    return app
