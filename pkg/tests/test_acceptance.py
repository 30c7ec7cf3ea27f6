"""Release gate: one test per shipping requirement.

Each test here stands alone as a pass/fail verdict on a subsystem,
re-running the load-bearing checks at their stated tolerances instead
of trusting the unit suites by reputation. Oracles are imported from
the unit suites where they already exist (hand-written loop references,
the scalar canny implementation, the threaded cluster harness) so the
comparisons stay independent of the code under test.
"""

import math
import threading
import time

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

import diffserve.adapters as ad
import diffserve.pipelines as pl
import diffserve.preprocess as pp
from diffserve import tensor as T
from diffserve.cluster import (
    CooldownState,
    RouterConfig,
    ScaleActions,
    ScalingPolicy,
    desired_workers,
    pick_worker,
    reconcile,
)
from diffserve.models import LoRAConfig, TextEncoderConfig, UNetConfig, init_seeded
from diffserve.models import text_encoder as te
from diffserve.models.vae import vae_decode, vae_encode
from diffserve.perfbench import OptimizationConfig, compare_report, run_benchmark
from diffserve.schedulers import (
    MODES,
    SchedulerState,
    add_noise,
    ddim_step,
    make_schedule,
    select_timesteps,
)
from diffserve.server import ServerConfig, create_app
from diffserve.tensor import Rng, Tensor

from conftest import build_toy_model
from test_cluster import PrestartedLauncher, RouterHarness, ThreadWorker, _run_batch
from test_preprocess import ref_canny
from test_tensor import attention_loops, conv2d_loops, group_norm_loops, matmul_loops


def test_kernel_oracle_suite():
    """matmul/conv2d/attention/norms vs naive loop references, 100 cases each, 1e-5."""
    started = time.monotonic()
    rng = np.random.default_rng(20240817)

    for _ in range(100):
        n, k, m = rng.integers(1, 10, size=3)
        a = rng.standard_normal((n, k)).astype(np.float32)
        b = rng.standard_normal((k, m)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).np()
        assert np.allclose(got, matmul_loops(a, b), atol=1e-5)

    for _ in range(100):
        c_in, c_out = rng.integers(1, 4, size=2)
        kh = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.integers(0, 2))
        h = int(rng.integers(max(2, kh - 2 * padding), 8))
        wd = int(rng.integers(max(2, kh - 2 * padding), 8))
        x = rng.standard_normal((c_in, h, wd)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, kh, kh)).astype(np.float32)
        bias = rng.standard_normal(c_out).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=stride, padding=padding).np()
        assert np.allclose(got, conv2d_loops(x, w, bias, stride, padding), atol=1e-5)

    for _ in range(100):
        lq, lk, d, dv = (int(v) for v in rng.integers(1, 9, size=4))
        q = rng.standard_normal((lq, d)).astype(np.float32)
        k = rng.standard_normal((lk, d)).astype(np.float32)
        v = rng.standard_normal((lk, dv)).astype(np.float32)
        got = T.attention(Tensor(q), Tensor(k), Tensor(v)).np()
        assert np.allclose(got, attention_loops(q, k, v), atol=1e-5)

    for _ in range(100):
        groups = int(rng.choice([1, 2, 4]))
        c = groups * int(rng.integers(1, 5))
        h, wd = (int(v) for v in rng.integers(2, 7, size=2))
        x = rng.standard_normal((c, h, wd)).astype(np.float32)
        gamma = rng.standard_normal(c).astype(np.float32)
        beta = rng.standard_normal(c).astype(np.float32)
        got = T.group_norm(Tensor(x), groups, Tensor(gamma), Tensor(beta)).np()
        assert np.allclose(got, group_norm_loops(x, groups, gamma, beta), atol=1e-5)

    for _ in range(100):
        rows, d = (int(v) for v in rng.integers(1, 9, size=2))
        x = rng.standard_normal((rows, d)).astype(np.float32)
        gamma = rng.standard_normal(d).astype(np.float32)
        beta = rng.standard_normal(d).astype(np.float32)
        got = T.layer_norm(Tensor(x), Tensor(gamma), Tensor(beta)).np()
        want = np.zeros_like(x, dtype=np.float64)
        for i in range(rows):
            row = x[i].astype(np.float64)
            want[i] = (row - row.mean()) / math.sqrt(row.var() + 1e-5) * gamma + beta
        assert np.allclose(got, want, atol=1e-5)

    assert time.monotonic() - started < 30.0


def test_scheduler_identity_suite():
    """Forward-process identities for both beta modes, plus exact DDIM inversion."""
    for mode in MODES:
        s = make_schedule(mode)

        # alpha_bar strictly decreasing, and equal to the running product
        running = 1.0
        prev = 1.0
        for t in range(s.T):
            running *= float(s.alphas[t])
            abar = s.alpha_bar(t)
            assert abar < prev
            assert abs(abar - running) < 1e-12
            prev = abar

        # sqrt(abar)^2 + sqrt(1-abar)^2 == 1 at every t
        for t in range(s.T):
            a = s.alpha_bar(t)
            assert abs(math.sqrt(a) ** 2 + math.sqrt(1.0 - a) ** 2 - 1.0) < 1e-6

    # noising with a known eps, then one DDIM step straight to the clean
    # state with that exact eps, must hand back x0; draws at std 0.5 keep
    # |x_t| inside the basin where dividing by sqrt(abar_999) stays under
    # the bound in float32
    s = make_schedule("linear")
    rng = np.random.default_rng(7)
    for _ in range(20):
        t = int(rng.integers(0, s.T))
        x0 = Tensor((rng.standard_normal((4, 8, 8)) * 0.5).astype(np.float32))
        eps = Tensor((rng.standard_normal((4, 8, 8)) * 0.5).astype(np.float32))
        x_t = add_noise(x0, eps, t, s)
        state = SchedulerState(s, [t])
        recovered = ddim_step(x_t, eps, t, -1, state)
        assert np.abs(recovered.np() - x0.np()).max() < 1e-5


def test_adapter_semantics_suite():
    """LoRA no-op conditions, fold/unfold, folded-vs-dynamic, inert ControlNet."""
    unet_bundle = init_seeded(UNetConfig(), 2)
    te_bundle = init_seeded(TextEncoderConfig(), 1)
    emb = te.encode_text(te.tokenize("a stone bridge", 32), te_bundle.tensors, TextEncoderConfig())
    targets = ad.attention_projection_targets(UNetConfig())
    lora_cfg = LoRAConfig(r=4, alpha=4.0, targets=tuple(targets),
                          target_dims=tuple((64, 64) for _ in targets))
    lora = ad.LoraAdapter.from_bundle(init_seeded(lora_cfg, 77), "style-check")

    def forward(params):
        lat = Rng(3).normal((4, 8, 8))
        return pl.unet_forward(lat, 500, emb, params, UNetConfig()).np()

    base = forward(unet_bundle.tensors)

    # strength 0 and B=0 leave the forward pass bit-identical
    assert np.array_equal(base, forward(ad.apply_lora(unet_bundle, lora, 0.0)))
    zero_b = ad.LoraAdapter("zero-b", 4, 4.0,
                            {t: (Rng(5).normal((4, 64)), Tensor.zeros((64, 4))) for t in targets})
    assert np.array_equal(base, forward(ad.apply_lora(unet_bundle, zero_b, 1.0)))

    # fold/unfold returns to the base weights within 1e-6
    folded = ad.fold_lora(unet_bundle, lora, 1.0)
    restored = ad.unfold_lora(folded, lora, 1.0)
    for name in unet_bundle.tensors:
        diff = np.abs(restored.tensors[name].np() - unet_bundle.tensors[name].np())
        assert diff.max() < 1e-6, name

    # folding is a different evaluation order of the same weights
    dynamic = forward(ad.apply_lora(unet_bundle, lora, 0.7))
    premerged = forward(ad.fold_lora(unet_bundle, lora, 0.7).tensors)
    assert np.abs(dynamic - premerged).max() < 1e-5

    # a fresh ControlNet injects exact zeros: full generations must agree
    model = build_toy_model()
    init = pl.text_to_image(model, pl.PipelineParams(prompt="a pier", steps=3, seed=40))
    plain = pl.PipelineParams(prompt="winter", steps=2, strength=0.5, seed=9, init_image=init)
    controlled = pl.PipelineParams(
        prompt="winter", steps=2, strength=0.5, seed=9, init_image=init,
        controlnet_name="edges", controlnet_scale=1.0, preprocessor="canny",
    )
    assert np.array_equal(
        pl.edit(model, controlled).np(), pl.image_to_image(model, plain).np()
    )


def test_canny_oracle():
    """Edge maps agree pixel-for-pixel with the scalar reference."""
    step = np.zeros((16, 16))
    step[:, 8:] = 1.0
    fixtures = [np.full((16, 16), 0.7), step, np.rot90(step).copy()]
    rng = np.random.default_rng(11)
    fixtures += [rng.random((16, 16)) for _ in range(20)]
    for i, img in enumerate(fixtures):
        got = pp.canny(pp.GrayImage(img), 0.1, 0.3).data
        want = ref_canny(img.tolist(), 0.1, 0.3)
        assert np.array_equal(got, want), f"fixture {i} diverged"
    constant = pp.canny(pp.GrayImage(np.full((16, 16), 0.7)), 0.1, 0.3)
    assert not constant.data.any()


def test_pipeline_determinism_and_contracts(monkeypatch):
    """Seeded reproducibility plus the documented degenerate-input behaviors."""
    model = build_toy_model()

    params = pl.PipelineParams(prompt="a starry sky", negative_prompt="noise",
                               steps=4, seed=11, guidance_scale=6.0)
    assert np.array_equal(pl.text_to_image(model, params).np(),
                          pl.text_to_image(model, params).np())

    # guidance 1 collapses to a conditional-only sampler
    g1 = pl.PipelineParams(prompt="a starry sky", negative_prompt="noise",
                           steps=4, seed=11, guidance_scale=1.0)
    full = pl.text_to_image(model, g1)
    emb = pl._encode_prompt(model, g1.prompt)
    x = Rng(g1.seed).normal((4, 8, 8))
    ts = select_timesteps(model.schedule.T, g1.steps)
    state = SchedulerState(model.schedule, ts)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps = pl.unet_forward(x, t, emb, model.unet.tensors, model.unet.config)
        x = ddim_step(x, eps, t, t_prev, state)
    manual = vae_decode(x, model.vae.tensors, model.vae.config)
    assert np.array_equal(full.np(), manual.np())

    # strength 0 skips denoising entirely: output is the VAE round trip
    init = pl.text_to_image(model, pl.PipelineParams(prompt="a lighthouse", steps=3, seed=40))
    s0 = pl.PipelineParams(prompt="x", steps=10, strength=0.0, seed=3, init_image=init)
    round_trip = vae_decode(vae_encode(init, model.vae.tensors, model.vae.config),
                            model.vae.tensors, model.vae.config)
    assert np.array_equal(pl.image_to_image(model, s0).np(), round_trip.np())

    # mask-0 pixels survive inpainting untouched
    mask_data = np.zeros((64, 64), dtype=np.float32)
    mask_data[20:44, 12:52] = 1.0
    inp = pl.PipelineParams(prompt="a comet", steps=3, seed=5, init_image=init,
                            mask_image=pp.GrayImage(mask_data))
    out = pl.inpaint(model, inp).np()
    keep = mask_data < 0.5
    assert np.array_equal(out[:, keep], init.np()[:, keep])

    # executed denoise steps follow round(strength * steps)
    calls = []
    orig = pl.unet_forward
    monkeypatch.setattr(pl, "unet_forward",
                        lambda *a, **kw: (calls.append(a[1]), orig(*a, **kw))[1])
    for strength, steps, expected in [(1.0, 4, 4), (0.5, 20, 10), (0.8, 25, 20), (0.3, 4, 1)]:
        calls.clear()
        pl.image_to_image(model, pl.PipelineParams(
            prompt="x", steps=steps, strength=strength, seed=3, init_image=init))
        assert len(calls) == 2 * expected, (strength, steps)
        assert round(strength * steps) == expected


SAMPLE_REQUEST = {
    "task_id": "001",
    "prompt": "romantic starry sky",
    "negative_prompt": "noise, low-quality",
    "func_name": "t2i",
    "steps": 25,
    "image_num": 1,
    "width": 64,
    "height": 64,
    "use_base64": True,
}


def test_api_contract():
    """The documented request shape round-trips; failures map to their codes."""
    import base64
    import io

    from PIL import Image

    model = build_toy_model()
    with TestClient(create_app(model=model)) as client:
        r = client.post("/generate", json=dict(SAMPLE_REQUEST))
        assert r.status_code == 200
        body = r.json()
        assert body["task_id"] == "001"
        assert len(body["images"]) == SAMPLE_REQUEST["image_num"]
        for payload in body["images"]:
            img = Image.open(io.BytesIO(base64.b64decode(payload)))
            assert img.size == (64, 64)

        two = dict(SAMPLE_REQUEST, task_id="002", image_num=2, steps=2)
        body = client.post("/generate", json=two).json()
        assert len(body["images"]) == 2

        # schema violation: unknown field, named in the complaint
        bad = dict(SAMPLE_REQUEST, steps=2)
        bad["promt"] = bad.pop("prompt")
        r = client.post("/generate", json=bad)
        assert r.status_code == 400
        assert "promt" in r.json()["detail"]

        # unknown adapter vs missing required image vs out-of-range field
        r = client.post("/generate", json=dict(SAMPLE_REQUEST, steps=2, lora_name="nope"))
        assert r.status_code == 404
        r = client.post("/generate", json=dict(SAMPLE_REQUEST, steps=2, func_name="i2i"))
        assert r.status_code == 422
        r = client.post("/generate", json=dict(SAMPLE_REQUEST, steps=2, image_num=0))
        assert r.status_code == 400

    # capacity: C running + B queued admitted, request C+B+1 bounced
    cfg = ServerConfig(concurrency=2, queue_size=2, stub_latency_ms=400.0)
    with TestClient(create_app(cfg, model=model)) as client:
        statuses = []

        def fire(i):
            statuses.append(client.post("/generate",
                                        json=dict(SAMPLE_REQUEST, task_id=f"cap-{i}")).status_code)

        threads = [threading.Thread(target=fire, args=(i,)) for i in range(4)]
        for th in threads:
            th.start()
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            h = client.get("/health").json()
            if h["in_flight"] == 2 and h["queue_depth"] == 2:
                break
            time.sleep(0.02)
        else:
            pytest.fail("server never reached the loaded state")
        overflow = client.post("/generate", json=dict(SAMPLE_REQUEST, task_id="cap-extra"))
        assert overflow.status_code == 503
        for th in threads:
            th.join()
        assert statuses == [200, 200, 200, 200]


def test_optimization_suite():
    """Optimizations change time and memory, never pixels: 20-repeat protocol."""
    started = time.monotonic()
    model = build_toy_model()
    params = pl.PipelineParams(prompt="a red bird on snow", negative_prompt="blurry",
                               seed=7, steps=25, guidance_scale=6.5, lora_name="style")

    baseline = run_benchmark(model, params, OptimizationConfig.baseline(), repeats=20)
    optimized = run_benchmark(model, params, OptimizationConfig.optimized(), repeats=20)

    # every knob combination produces the exact same PNG bytes
    digests = set()
    for bits in range(16):
        cfg = OptimizationConfig(
            fold_lora=bool(bits & 1),
            cache_text_embeddings=bool(bits & 2),
            precompute_schedule=bool(bits & 4),
            reuse_buffers=bool(bits & 8),
        )
        digests.add(run_benchmark(model, params, cfg, repeats=1).image_sha256)
    assert digests == {baseline.image_sha256}

    speedup = baseline.mean_ms / optimized.mean_ms
    assert speedup >= 1.3, f"all-on speedup only {speedup:.2f}x"

    reuse_only = run_benchmark(
        model, params, OptimizationConfig(reuse_buffers=True), repeats=1)
    assert reuse_only.unet_peak_bytes < baseline.unet_peak_bytes

    report = compare_report(baseline, optimized)
    lines = report.splitlines()
    assert any("baseline" in ln and "optimized" in ln for ln in lines)
    for stage in ("tokenize", "text_encode", "unet_loop", "vae_decode", "png_encode"):
        assert any(ln.strip().startswith(stage) for ln in lines), stage
    assert any("speedup:" in ln for ln in lines)
    assert any("memory ratio:" in ln for ln in lines)

    assert time.monotonic() - started < 300.0


def test_cluster_suite():
    """Dispatch policy, scaling math, and the router under real worker churn."""
    # pure policy: argmin with deterministic tie-break, demand formula, cooldown
    def recs(in_flights):
        from diffserve.cluster import WorkerRecord
        return [WorkerRecord(worker_id=i, address=f"w{i}", in_flight=f)
                for i, f in enumerate(in_flights)]

    assert pick_worker(recs([2, 0, 1])) == 1
    assert pick_worker(recs([3, 3, 3])) == 0
    counts = [0, 0, 0, 0]
    burst = recs([0, 0, 0, 0])
    for _ in range(100):
        wid = pick_worker(burst)
        burst[wid].in_flight += 1
        counts[wid] += 1
    assert counts == [25, 25, 25, 25]

    policy = ScalingPolicy(target_per_worker=2, min_workers=1, max_workers=8)
    assert desired_workers(7, 1, policy) == 4
    assert desired_workers(0, 0, policy) == 1
    assert desired_workers(10**6, 0, policy) == 8
    for q in range(30):
        assert desired_workers(q + 1, 3, policy) >= desired_workers(q, 3, policy)

    state = CooldownState()
    pol = ScalingPolicy(min_workers=1, max_workers=8, cooldown_s=10.0)
    assert reconcile(recs([0]), 3, pol, state, now=0.0) == ScaleActions(spawn=2)
    assert reconcile(recs([0, 0, 0]), 1, pol, state, now=1.0) == ScaleActions()
    assert reconcile(recs([0, 0, 0]), 1, pol, state, now=10.5).drain != ()

    # throughput: four workers vs one on 64 concurrent fixed-latency requests
    with httpx.Client(timeout=60.0, limits=httpx.Limits(max_connections=128)) as client:
        def timed(worker_count):
            workers = [ThreadWorker(latency_ms=40.0, concurrency=1).start()
                       for _ in range(worker_count)]
            harness = RouterHarness(
                PrestartedLauncher(workers),
                RouterConfig(
                    policy=ScalingPolicy(min_workers=worker_count, max_workers=worker_count),
                    health_interval_s=0.5,
                ),
            )
            try:
                t0 = time.perf_counter()
                results = _run_batch(client, harness.address, 64, pool_size=64)
                elapsed = time.perf_counter() - t0
            finally:
                harness.close()
            assert all(status == 200 for _, status, _ in results)
            return elapsed

        speedup = timed(1) / timed(4)
        assert speedup >= 3.0, f"4-worker speedup only {speedup:.2f}x"

        # killed worker leaves rotation within two probe rounds
        interval, probe_timeout = 0.15, 0.5
        workers = [ThreadWorker(latency_ms=1.0).start() for _ in range(2)]
        harness = RouterHarness(
            PrestartedLauncher(workers),
            RouterConfig(
                policy=ScalingPolicy(min_workers=2, max_workers=2, cooldown_s=60.0),
                health_interval_s=interval, probe_timeout_s=probe_timeout,
            ),
        )
        try:
            workers[0].kill(zombie=True)
            deadline = time.monotonic() + 2 * interval + probe_timeout + 1.0
            marked = False
            while time.monotonic() < deadline:
                table = {w["worker_id"]: w["status"]
                         for w in client.get(f"{harness.address}/cluster").json()["workers"]}
                if table.get(0) == "unhealthy":
                    marked = True
                    break
                time.sleep(0.05)
            assert marked, "killed worker never left rotation in the detection budget"
        finally:
            harness.close()

        # 500 requests with a mid-run kill: every one answered, none lost
        workers = [ThreadWorker(latency_ms=5.0, concurrency=2, queue_size=64)
                   .start() for _ in range(4)]
        harness = RouterHarness(
            PrestartedLauncher(workers),
            RouterConfig(
                policy=ScalingPolicy(min_workers=4, max_workers=4, cooldown_s=60.0),
                health_interval_s=0.2, probe_timeout_s=0.5,
            ),
        )
        killer = threading.Timer(0.4, lambda: workers[2].kill(zombie=True))
        try:
            killer.start()
            results = _run_batch(client, harness.address, 500, pool_size=32)
        finally:
            killer.cancel()
            harness.close()
        assert len(results) == 500
        assert all(status == 200 for _, status, _ in results)
        assert all(echoed == f"req-{i}" for i, _, echoed in results)
