/**
 * The page itself: one form with three tabs, a result gallery, mask
 * painting for inpaint, and a live condition-map preview. All logic
 * lives in the imported modules; this file only moves values between
 * them and the DOM.
 */

import { ApiError, Client } from "./api.js";
import type { ModelEntry } from "./api.js";
import { MaskBuffer } from "./mask.js";
import { fromBase64, readPngSize, toBase64 } from "./png.js";
import { TaskTracker } from "./poll.js";
import { PreviewController } from "./preview.js";
import type { GalleryItem, Tab } from "./state.js";
import { SessionState } from "./state.js";
import type { FieldError } from "./validate.js";
import { buildRequest, validateForm } from "./validate.js";

const DEFAULT_SERVER = "http://127.0.0.1:8000";
const MASK_SCALE = 4; // small latents mean small images; paint at 4x

const state = new SessionState();
let client = new Client(localStorage.getItem("diffserve.server") ?? DEFAULT_SERVER);
let tracker = new TaskTracker(client);
let preview = new PreviewController(client);
let adapters = { loras: [] as string[], controlnets: [] as string[] };
let mask: MaskBuffer | null = null;
let brushSize = 6;
let erasing = false;

function $(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function input(id: string): HTMLInputElement {
  return $(id) as HTMLInputElement;
}

function select(id: string): HTMLSelectElement {
  return $(id) as HTMLSelectElement;
}

// ------------------------------------------------------------- connect

async function connect(): Promise<void> {
  const base = input("server-url").value.trim() || DEFAULT_SERVER;
  client = new Client(base);
  tracker = new TaskTracker(client);
  preview = new PreviewController(client);
  localStorage.setItem("diffserve.server", client.baseUrl);
  try {
    const health = await client.health();
    const models = await client.models();
    state.setModels(models, health.model);
    const served = models.find((m) => m.model_name === health.model);
    adapters = {
      loras: served?.loras ?? [],
      controlnets: served?.controlnets ?? [],
    };
    $("server-status").textContent = `serving ${health.model}`;
    $("server-status").className = "ok";
    renderModelChoices(models, health.model);
    renderAdapterChoices();
    readFormIntoInputs();
  } catch (err) {
    $("server-status").textContent = err instanceof Error ? err.message : String(err);
    $("server-status").className = "error";
  }
}

function renderModelChoices(models: ModelEntry[], served: string): void {
  const box = select("model-select");
  box.innerHTML = "";
  for (const entry of models) {
    const option = document.createElement("option");
    option.value = entry.model_name;
    option.textContent = `${entry.model_name} (${entry.domain_tag}, ${entry.default_width}x${entry.default_height})`;
    option.selected = entry.model_name === served;
    option.disabled = entry.model_name !== served;
    box.appendChild(option);
  }
}

function renderAdapterChoices(): void {
  const lora = select("lora-select");
  lora.innerHTML = "<option value=''>none</option>";
  for (const name of adapters.loras) {
    const option = document.createElement("option");
    option.value = name;
    option.textContent = name;
    lora.appendChild(option);
  }
  const cn = select("controlnet-select");
  cn.innerHTML = "<option value=''>none</option>";
  for (const name of adapters.controlnets) {
    const option = document.createElement("option");
    option.value = name;
    option.textContent = name;
    cn.appendChild(option);
  }
}

// ---------------------------------------------------------------- form

function readInputsIntoForm(): void {
  const f = state.form;
  f.prompt = input("prompt").value;
  f.negative_prompt = input("negative-prompt").value;
  f.steps = parseInt(input("steps").value, 10);
  f.image_num = parseInt(input("image-num").value, 10);
  f.width = parseInt(input("width").value, 10);
  f.height = parseInt(input("height").value, 10);
  const seedText = input("seed").value.trim();
  f.seed = seedText === "" ? null : Number(seedText);
  f.scheduler = select("scheduler").value;
  f.guidance_scale = parseFloat(input("guidance").value);
  f.strength = parseFloat(input("strength").value);
  f.lora_name = select("lora-select").value || null;
  f.lora_strength = parseFloat(input("lora-strength").value);
  f.controlnet_name = select("controlnet-select").value || null;
  f.controlnet_scale = parseFloat(input("controlnet-scale").value);
  f.preprocessor = select("preprocessor").value;
  state.syncFunc();
}

function readFormIntoInputs(): void {
  const f = state.form;
  input("prompt").value = f.prompt;
  input("negative-prompt").value = f.negative_prompt;
  input("steps").value = String(f.steps);
  input("image-num").value = String(f.image_num);
  input("width").value = String(f.width);
  input("height").value = String(f.height);
  input("seed").value = f.seed === null ? "" : String(f.seed);
  select("scheduler").value = f.scheduler;
  input("guidance").value = String(f.guidance_scale);
  input("strength").value = String(f.strength);
  select("lora-select").value = f.lora_name ?? "";
  input("lora-strength").value = String(f.lora_strength);
  select("controlnet-select").value = f.controlnet_name ?? "";
  input("controlnet-scale").value = String(f.controlnet_scale);
  select("preprocessor").value = f.preprocessor;
  renderInitPreview();
  renderMaskCanvas();
}

function showErrors(errors: FieldError[]): void {
  const list = $("form-errors");
  list.innerHTML = "";
  document.querySelectorAll(".invalid").forEach((node) => node.classList.remove("invalid"));
  for (const error of errors) {
    const item = document.createElement("li");
    item.textContent = `${error.field}: ${error.message}`;
    list.appendChild(item);
    const widget = document.querySelector(`[data-field="${error.field}"]`);
    widget?.classList.add("invalid");
  }
}

async function submit(): Promise<void> {
  readInputsIntoForm();
  const errors = validateForm(state.form, adapters);
  showErrors(errors);
  if (errors.length > 0) return;

  const request = buildRequest(state.form, state.nextTaskId());
  const button = $("submit") as HTMLButtonElement;
  button.disabled = true;
  $("task-status").textContent = "generating";
  try {
    const result = await tracker.run(request);
    for (const item of state.addResult(request, result)) {
      renderGalleryItem(item);
    }
    $("task-status").textContent = `done in ${Math.round(result.elapsed_ms)}ms (seed ${result.seed})`;
  } catch (err) {
    if (err instanceof ApiError) {
      // surface the server's message next to the form like a local one
      showErrors([{ field: "server", message: err.detail }]);
    }
    $("task-status").textContent = err instanceof Error ? err.message : String(err);
  } finally {
    button.disabled = false;
  }
}

// ------------------------------------------------------------- gallery

function renderGalleryItem(item: GalleryItem): void {
  const card = document.createElement("div");
  card.className = "card";

  const img = document.createElement("img");
  img.src = `data:image/png;base64,${item.image}`;
  img.alt = item.params.prompt;
  card.appendChild(img);

  const caption = document.createElement("div");
  caption.className = "caption";
  caption.textContent = `${item.params.func_name} seed ${item.seed}`;
  card.appendChild(caption);

  const actions = document.createElement("div");
  actions.className = "actions";
  const buttons: Array<[string, () => void]> = [
    ["reuse seed", () => loadForm(() => state.reuseSeed(item))],
    ["to i2i", () => loadForm(() => state.sendToI2i(item))],
    ["to inpaint", () => loadForm(() => state.sendToInpaint(item))],
  ];
  for (const [label, action] of buttons) {
    const button = document.createElement("button");
    button.textContent = label;
    button.addEventListener("click", action);
    actions.appendChild(button);
  }
  card.appendChild(actions);

  $("gallery").prepend(card);
}

function loadForm(load: () => void): void {
  load();
  setTab(state.tab);
  if (state.tab === "inpaint") {
    resetMask();
  }
  readFormIntoInputs();
}

// ----------------------------------------------------- tabs and images

function setTab(tab: Tab): void {
  state.selectTab(tab);
  document.querySelectorAll(".tab").forEach((node) => {
    node.classList.toggle("active", (node as HTMLElement).dataset.tab === tab);
  });
  document.body.dataset.tab = tab;
}

function renderInitPreview(): void {
  const img = $("init-preview") as HTMLImageElement;
  if (state.form.init_image) {
    img.src = `data:image/png;base64,${state.form.init_image}`;
    img.style.display = "";
  } else {
    img.removeAttribute("src");
    img.style.display = "none";
  }
}

async function onInitUpload(file: File): Promise<void> {
  const bytes = new Uint8Array(await file.arrayBuffer());
  const payload = toBase64(bytes);
  try {
    const size = readPngSize(bytes);
    state.form.width = size.width;
    state.form.height = size.height;
  } catch {
    showErrors([{ field: "init_image", message: "expected a PNG payload" }]);
    return;
  }
  state.form.init_image = payload;
  state.form.mask_image = null;
  resetMask();
  readFormIntoInputs();
}

async function onConditionUpload(file: File): Promise<void> {
  state.form.condition_image = toBase64(new Uint8Array(await file.arrayBuffer()));
  state.syncFunc();
  void refreshPreview();
}

// ---------------------------------------------------------------- mask

function resetMask(): void {
  if (state.form.init_image) {
    const size = readPngSize(fromBase64(state.form.init_image));
    mask = new MaskBuffer(size.width, size.height);
  } else {
    mask = null;
  }
  state.form.mask_image = null;
  renderMaskCanvas();
}

function renderMaskCanvas(): void {
  const canvas = $("mask-canvas") as HTMLCanvasElement;
  const base = $("mask-base") as HTMLCanvasElement;
  if (!mask || !state.form.init_image) {
    canvas.width = base.width = 0;
    canvas.height = base.height = 0;
    return;
  }
  base.width = canvas.width = mask.width * MASK_SCALE;
  base.height = canvas.height = mask.height * MASK_SCALE;

  const img = new Image();
  img.onload = () => {
    const ctx = base.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(img, 0, 0, base.width, base.height);
  };
  img.src = `data:image/png;base64,${state.form.init_image}`;

  paintOverlay();
}

function paintOverlay(): void {
  if (!mask) return;
  const canvas = $("mask-canvas") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = "rgba(255, 64, 64, 0.45)";
  for (let y = 0; y < mask.height; y++) {
    for (let x = 0; x < mask.width; x++) {
      if (mask.data[y * mask.width + x]) {
        ctx.fillRect(x * MASK_SCALE, y * MASK_SCALE, MASK_SCALE, MASK_SCALE);
      }
    }
  }
  $("mask-coverage").textContent = `${(mask.coverage() * 100).toFixed(1)}% masked`;
}

function wireMaskPainting(): void {
  const canvas = $("mask-canvas") as HTMLCanvasElement;
  let last: [number, number] | null = null;

  const position = (event: PointerEvent): [number, number] => {
    const rect = canvas.getBoundingClientRect();
    return [
      ((event.clientX - rect.left) / rect.width) * (mask?.width ?? 1),
      ((event.clientY - rect.top) / rect.height) * (mask?.height ?? 1),
    ];
  };

  canvas.addEventListener("pointerdown", (event) => {
    if (!mask) return;
    canvas.setPointerCapture(event.pointerId);
    const [x, y] = position(event);
    mask.stamp(x, y, brushSize, erasing ? 0 : 255);
    last = [x, y];
    syncMaskToForm();
  });
  canvas.addEventListener("pointermove", (event) => {
    if (!mask || !last) return;
    const [x, y] = position(event);
    mask.stroke(last[0], last[1], x, y, brushSize, erasing ? 0 : 255);
    last = [x, y];
    syncMaskToForm();
  });
  const stop = () => {
    last = null;
  };
  canvas.addEventListener("pointerup", stop);
  canvas.addEventListener("pointercancel", stop);
}

function syncMaskToForm(): void {
  if (!mask) return;
  state.form.mask_image = mask.isEmpty() ? null : mask.toPngBase64();
  paintOverlay();
}

// ------------------------------------------------------------- preview

async function refreshPreview(): Promise<void> {
  const source = state.form.condition_image ?? state.form.init_image;
  const kind = select("preprocessor").value as "canny" | "depth" | "none";
  const img = $("condition-preview") as HTMLImageElement;
  if (!source) {
    img.style.display = "none";
    return;
  }
  try {
    const low = parseFloat(input("canny-low").value);
    const high = parseFloat(input("canny-high").value);
    const result = await preview.refresh(source, kind, low, high);
    if (result) {
      img.src = `data:image/png;base64,${result.image}`;
      img.style.display = "";
      $("preview-status").textContent = `${result.width}x${result.height} ${kind}`;
    }
  } catch (err) {
    $("preview-status").textContent =
      err instanceof ApiError ? err.detail : err instanceof Error ? err.message : String(err);
  }
}

// ---------------------------------------------------------------- init

function wire(): void {
  $("connect").addEventListener("click", () => void connect());
  input("server-url").value = client.baseUrl;

  document.querySelectorAll(".tab").forEach((node) => {
    node.addEventListener("click", () => {
      readInputsIntoForm();
      setTab((node as HTMLElement).dataset.tab as Tab);
    });
  });

  $("submit").addEventListener("click", () => void submit());

  input("init-upload").addEventListener("change", (event) => {
    const file = (event.target as HTMLInputElement).files?.[0];
    if (file) void onInitUpload(file);
  });
  input("condition-upload").addEventListener("change", (event) => {
    const file = (event.target as HTMLInputElement).files?.[0];
    if (file) void onConditionUpload(file);
  });

  input("brush-size").addEventListener("input", () => {
    brushSize = parseFloat(input("brush-size").value);
  });
  input("erase-toggle").addEventListener("change", () => {
    erasing = input("erase-toggle").checked;
  });
  $("clear-mask").addEventListener("click", () => {
    resetMask();
  });

  for (const id of ["preprocessor", "canny-low", "canny-high"]) {
    $(id).addEventListener("change", () => {
      readInputsIntoForm();
      void refreshPreview();
    });
  }
  select("controlnet-select").addEventListener("change", () => {
    readInputsIntoForm();
    void refreshPreview();
  });

  wireMaskPainting();
  setTab("t2i");
  readFormIntoInputs();

  setInterval(() => {
    const n = tracker.outstanding();
    $("task-counter").textContent = n === 0 ? "" : `${n} running`;
  }, 250);

  void connect();
}

document.addEventListener("DOMContentLoaded", wire);
