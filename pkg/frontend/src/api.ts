/**
 * Typed client for the generation server. Field names match the wire
 * format exactly; there is no casing translation layer to drift out of
 * sync with the server.
 */

export interface GenerationRequest {
  task_id: string;
  prompt: string;
  func_name: "t2i" | "i2i" | "inpaint" | "edit";
  steps: number;
  image_num: number;
  width: number;
  height: number;
  use_base64: boolean;
  negative_prompt: string;
  seed: number | null;
  init_image: string | null;
  mask_image: string | null;
  condition_image: string | null;
  lora_name: string | null;
  lora_strength: number;
  controlnet_name: string | null;
  controlnet_scale: number;
  preprocessor: string;
  scheduler: string;
  guidance_scale: number;
  strength: number;
}

export interface GenerationResult {
  task_id: string;
  success: boolean;
  images: string[];
  seed: number;
  elapsed_ms: number;
  error?: string;
}

export interface TaskView {
  task_id: string;
  status: "queued" | "running" | "done" | "failed";
  submitted_at: number;
  finished_at?: number;
  result?: GenerationResult;
}

export interface ModelEntry {
  model_name: string;
  domain_tag: string;
  domain: string;
  default_width: number;
  default_height: number;
  param_count: number;
  adapters: string[];
  loras: string[];
  controlnets: string[];
}

export interface HealthInfo {
  status: string;
  model: string;
  queue_depth: number;
  in_flight: number;
}

export interface PreprocessResult {
  image: string;
  width: number;
  height: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`${status}: ${detail}`);
    this.name = "ApiError";
  }
}

async function parseOrThrow<T>(response: Response): Promise<T> {
  if (response.ok) {
    return (await response.json()) as T;
  }
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, detail);
}

export class Client {
  readonly baseUrl: string;

  constructor(baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async post<T>(path: string, payload: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
    return parseOrThrow<T>(response);
  }

  private async get<T>(path: string): Promise<T> {
    return parseOrThrow<T>(await fetch(this.baseUrl + path));
  }

  generate(request: GenerationRequest): Promise<GenerationResult> {
    return this.post("/generate", request);
  }

  submitTask(request: GenerationRequest): Promise<{ task_id: string; status: string }> {
    return this.post("/tasks", request);
  }

  task(taskId: string): Promise<TaskView> {
    return this.get(`/tasks/${encodeURIComponent(taskId)}`);
  }

  models(): Promise<ModelEntry[]> {
    return this.get("/models");
  }

  model(name: string): Promise<ModelEntry> {
    return this.get(`/models/${encodeURIComponent(name)}`);
  }

  health(): Promise<HealthInfo> {
    return this.get("/health");
  }

  preprocess(
    image: string,
    preprocessor: "canny" | "depth" | "none",
    cannyLow = 0.1,
    cannyHigh = 0.3,
  ): Promise<PreprocessResult> {
    return this.post("/preprocess", {
      image,
      preprocessor,
      canny_low: cannyLow,
      canny_high: cannyHigh,
    });
  }
}
