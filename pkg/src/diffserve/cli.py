"""Command line entry points.

`serve` runs the HTTP service in one of three roles: a standalone
single node, a worker (same behavior, meant to sit behind a router),
or a router that spawns and fronts a pool of worker processes.
`bench run` times the text-to-image path with and without the
optimization passes and prints the comparison table.

Every serve flag can also come from the environment with a DIFFSERVE_
prefix (DIFFSERVE_PORT=9000 and so on).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import uvicorn

from .cluster import Router, RouterConfig, ScalingPolicy, SubprocessLauncher, create_router_app
from .models.zoo import build_model
from .perfbench import OptimizationConfig, compare_report, run_benchmark
from .pipelines import PipelineParams
from .server import ServerConfig, create_app

DEFAULT_WORKLOAD = {
    "prompt": "a lantern-lit harbor at night, oil painting",
    "negative_prompt": "blurry, low-quality",
    "steps": 25,
    "width": 64,
    "height": 64,
    "seed": 7,
    "lora_name": "style",
}


@click.group()
def main():
    """Small diffusion image service: serve it, benchmark it."""


def _cluster_settings(path: str | None) -> tuple[ScalingPolicy, tuple[int, int], float]:
    """Worker port range and scaling policy from the cluster config file."""
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        known = {
            "worker_port_start", "worker_port_end", "target_per_worker",
            "min_workers", "max_workers", "cooldown_s", "health_interval_s",
        }
        unknown = sorted(set(raw) - known)
        if unknown:
            raise click.ClickException(f"unknown cluster config keys: {', '.join(unknown)}")
    policy = ScalingPolicy(
        target_per_worker=raw.get("target_per_worker", 2),
        min_workers=raw.get("min_workers", 1),
        max_workers=raw.get("max_workers", 4),
        cooldown_s=raw.get("cooldown_s", 10.0),
    )
    ports = (raw.get("worker_port_start", 8101), raw.get("worker_port_end", 8199))
    if ports[0] > ports[1]:
        raise click.ClickException(f"empty worker port range [{ports[0]}, {ports[1]}]")
    if ports[1] - ports[0] + 1 < policy.max_workers:
        raise click.ClickException(
            f"port range [{ports[0]}, {ports[1]}] holds fewer than max_workers={policy.max_workers}"
        )
    return policy, ports, float(raw.get("health_interval_s", 1.0))


def _worker_command(port_placeholder: str, host: str, opts: dict) -> list[str]:
    cmd = [
        sys.executable, "-m", "diffserve.cli", "serve",
        "--mode", "worker", "--host", host, "--port", port_placeholder,
    ]
    for flag, value in opts.items():
        if value is not None:
            cmd += [flag, str(value)]
    return cmd


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True, envvar="DIFFSERVE_HOST")
@click.option("--port", default=8000, show_default=True, envvar="DIFFSERVE_PORT")
@click.option("--models-dir", default="models", show_default=True, envvar="DIFFSERVE_MODELS_DIR",
              help="Model bundle directory; seeded with the built-in zoo on first use.")
@click.option("--model", default=None, envvar="DIFFSERVE_MODEL",
              help="Which registry entry to serve (default: the first one).")
@click.option("--output-dir", default="outputs", show_default=True, envvar="DIFFSERVE_OUTPUT_DIR")
@click.option("--concurrency", type=int, default=None, envvar="DIFFSERVE_CONCURRENCY",
              help="Generation workers per node (default: cpu count).")
@click.option("--queue-size", type=int, default=None, envvar="DIFFSERVE_QUEUE_SIZE",
              help="Backlog accepted beyond the workers before 503.")
@click.option("--mode", type=click.Choice(["single", "worker", "router"]), default="single",
              show_default=True, envvar="DIFFSERVE_MODE")
@click.option("--cluster-config", type=click.Path(exists=True, dir_okay=False), default=None,
              envvar="DIFFSERVE_CLUSTER_CONFIG",
              help="Router mode: JSON with the worker port range and scaling policy.")
@click.option("--stub-latency-ms", type=float, default=None, envvar="DIFFSERVE_STUB_LATENCY_MS",
              help="Skip real generation and sleep this long instead (testing aid).")
def serve(host, port, models_dir, model, output_dir, concurrency, queue_size, mode,
          cluster_config, stub_latency_ms):
    """Run the image generation service."""
    if mode == "router":
        policy, (port_lo, port_hi), interval = _cluster_settings(cluster_config)
        command = _worker_command("{port}", host, {
            "--models-dir": models_dir,
            "--model": model,
            "--output-dir": output_dir,
            "--concurrency": concurrency,
            "--queue-size": queue_size,
            "--stub-latency-ms": stub_latency_ms,
        })
        launcher = SubprocessLauncher(command, port_lo, port_hi)
        router = Router(launcher, RouterConfig(policy=policy, health_interval_s=interval))
        router.start()
        try:
            uvicorn.run(create_router_app(router), host=host, port=port)
        finally:
            router.stop()
        return

    overrides = {
        "model": model,
        "models_dir": models_dir,
        "output_dir": output_dir,
        "concurrency": concurrency,
        "queue_size": queue_size,
        "stub_latency_ms": stub_latency_ms,
    }
    config = ServerConfig(**{k: v for k, v in overrides.items() if v is not None})
    uvicorn.run(create_app(config), host=host, port=port)


@main.group()
def bench():
    """Latency and allocation benchmarks."""


@bench.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON with optional 'workload', 'optimizations', 'model' keys.")
@click.option("--repeats", default=20, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the table here and machine-readable records alongside.")
def bench_run(config_path, repeats, out):
    """Compare the baseline against the optimization passes."""
    raw = {}
    if config_path is not None:
        raw = json.loads(Path(config_path).read_text())
        unknown = sorted(set(raw) - {"workload", "optimizations", "model"})
        if unknown:
            raise click.ClickException(f"unknown bench config keys: {', '.join(unknown)}")

    model = build_model(raw.get("model", "toy-general"))
    try:
        params = PipelineParams(**{**DEFAULT_WORKLOAD, **raw.get("workload", {})})
    except TypeError as exc:
        raise click.ClickException(f"bad workload: {exc}") from None
    try:
        optimized_cfg = OptimizationConfig.from_dict(
            raw.get("optimizations", OptimizationConfig.optimized().to_dict())
        )
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None

    click.echo(f"benchmarking {params.steps} steps at "
               f"{params.width or 'default'}x{params.height or 'default'}, "
               f"{repeats} repeats per side")
    baseline = run_benchmark(model, params, OptimizationConfig.baseline(), repeats=repeats)
    optimized = run_benchmark(model, params, optimized_cfg, repeats=repeats)
    table = compare_report(baseline, optimized, out=Path(out) if out else None)
    click.echo(table)
    if out:
        click.echo(f"wrote {out} and {out}.json")


if __name__ == "__main__":
    main()
