/**
 * Client-side twin of the server's request validation. Every rule here
 * matches a rejection the server would produce, so a form that passes
 * never comes back with a schema error, and the submit button can show
 * problems inline before any network round trip.
 *
 * Deliberately absent: rules the server does not enforce at admission
 * time. A condition_image of the wrong size, for instance, is accepted
 * by the server's schema and only fails inside the pipeline, so
 * rejecting it here would make the client claim errors the server
 * contradicts.
 */

import type { GenerationRequest } from "./api.js";
import { fromBase64, readPngSize } from "./png.js";

export type GenerationForm = Omit<GenerationRequest, "task_id">;

export interface FieldError {
  field: string;
  message: string;
}

/** Adapter names valid for the model the server has loaded. */
export interface AdapterContext {
  loras: string[];
  controlnets: string[];
}

/** Admission bounds; these mirror the server's stock configuration. */
export interface Limits {
  maxImageNum: number;
  minSide: number;
  maxSide: number;
  sideStep: number;
}

export const DEFAULT_LIMITS: Limits = {
  maxImageNum: 4,
  minSide: 8,
  maxSide: 512,
  sideStep: 8,
};

export const FUNC_NAMES = ["t2i", "i2i", "inpaint", "edit"] as const;
export const SCHEDULERS = ["ddim", "ddpm"] as const;
export const PREPROCESSORS = ["canny", "depth", "none"] as const;

const KNOWN_FIELDS = new Set<string>([
  "prompt",
  "negative_prompt",
  "func_name",
  "steps",
  "image_num",
  "width",
  "height",
  "use_base64",
  "seed",
  "init_image",
  "mask_image",
  "condition_image",
  "lora_name",
  "lora_strength",
  "controlnet_name",
  "controlnet_scale",
  "preprocessor",
  "scheduler",
  "guidance_scale",
  "strength",
]);

export function emptyForm(funcName: GenerationForm["func_name"] = "t2i"): GenerationForm {
  return {
    prompt: "",
    negative_prompt: "",
    func_name: funcName,
    steps: 25,
    image_num: 1,
    width: 64,
    height: 64,
    use_base64: true,
    seed: null,
    init_image: null,
    mask_image: null,
    condition_image: null,
    lora_name: null,
    lora_strength: 1.0,
    controlnet_name: null,
    controlnet_scale: 1.0,
    preprocessor: "none",
    scheduler: "ddim",
    guidance_scale: 7.5,
    strength: 0.8,
  };
}

const STRICT_BASE64 = /^(?:[A-Za-z0-9+/]{4})*(?:[A-Za-z0-9+/]{2}==|[A-Za-z0-9+/]{3}=)?$/;

/**
 * Size of an attached PNG, or null with an error pushed if the payload
 * would be rejected. The server insists on strict base64 and an actual
 * PNG, so both are checked here.
 */
function attachedSize(
  field: string,
  payload: string,
  errors: FieldError[],
): { width: number; height: number } | null {
  if (!STRICT_BASE64.test(payload)) {
    errors.push({ field, message: "invalid base64 payload" });
    return null;
  }
  try {
    return readPngSize(fromBase64(payload));
  } catch {
    errors.push({ field, message: "expected a PNG payload" });
    return null;
  }
}

export function validateForm(
  form: GenerationForm,
  adapters: AdapterContext,
  limits: Limits = DEFAULT_LIMITS,
): FieldError[] {
  const errors: FieldError[] = [];
  const bad = (field: string, message: string) => errors.push({ field, message });

  for (const key of Object.keys(form)) {
    if (!KNOWN_FIELDS.has(key)) bad(key, "unknown field");
  }

  if (!(FUNC_NAMES as readonly string[]).includes(form.func_name)) {
    bad("func_name", `must be one of ${FUNC_NAMES.join(", ")}`);
  }
  if (!Number.isInteger(form.steps) || form.steps < 1) {
    bad("steps", `must be an integer >= 1, got ${form.steps}`);
  }
  if (
    !Number.isInteger(form.image_num) ||
    form.image_num < 1 ||
    form.image_num > limits.maxImageNum
  ) {
    bad("image_num", `must be in [1, ${limits.maxImageNum}], got ${form.image_num}`);
  }
  for (const [label, v] of [
    ["width", form.width],
    ["height", form.height],
  ] as const) {
    if (!Number.isInteger(v) || v < limits.minSide || v > limits.maxSide) {
      bad(label, `must be in [${limits.minSide}, ${limits.maxSide}], got ${v}`);
    } else if (v % limits.sideStep !== 0) {
      bad(label, `must be a positive multiple of ${limits.sideStep}, got ${v}`);
    }
  }
  if (form.seed !== null && (!Number.isInteger(form.seed) || form.seed < 0)) {
    bad("seed", `must be a non-negative integer, got ${form.seed}`);
  }
  if (!Number.isFinite(form.guidance_scale)) {
    bad("guidance_scale", "must be a number");
  }
  if (!Number.isFinite(form.strength) || form.strength < 0 || form.strength > 1) {
    bad("strength", `must be in [0, 1], got ${form.strength}`);
  }
  if (!Number.isFinite(form.lora_strength) || form.lora_strength < 0 || form.lora_strength > 1) {
    bad("lora_strength", `must be in [0, 1], got ${form.lora_strength}`);
  }
  if (!Number.isFinite(form.controlnet_scale) || form.controlnet_scale < 0) {
    bad("controlnet_scale", `must be >= 0, got ${form.controlnet_scale}`);
  }
  if (!(SCHEDULERS as readonly string[]).includes(form.scheduler)) {
    bad("scheduler", `no scheduler named '${form.scheduler}'`);
  }
  if (!(PREPROCESSORS as readonly string[]).includes(form.preprocessor)) {
    bad("preprocessor", `unknown preprocessor '${form.preprocessor}'`);
  }
  if (form.lora_name !== null && !adapters.loras.includes(form.lora_name)) {
    bad("lora_name", `no LoRA named '${form.lora_name}'`);
  }
  if (form.controlnet_name !== null && !adapters.controlnets.includes(form.controlnet_name)) {
    bad("controlnet_name", `no ControlNet named '${form.controlnet_name}'`);
  }

  const needsInit = form.func_name === "i2i" || form.func_name === "edit" || form.func_name === "inpaint";
  if (needsInit && form.init_image === null) {
    bad("init_image", `${form.func_name} requires init_image`);
  }
  if (form.func_name === "inpaint" && form.mask_image === null) {
    bad("mask_image", "inpaint requires mask_image");
  }
  if (
    form.controlnet_name !== null &&
    form.condition_image === null &&
    form.func_name !== "edit" // edit derives its condition from init_image
  ) {
    bad("condition_image", "controlnet requires condition_image");
  }

  for (const field of ["init_image", "mask_image"] as const) {
    const payload = form[field];
    if (payload === null) continue;
    const size = attachedSize(field, payload, errors);
    if (size && (size.width !== form.width || size.height !== form.height)) {
      bad(field, `is ${size.width}x${size.height}, request is for ${form.width}x${form.height}`);
    }
  }
  if (form.condition_image !== null) {
    attachedSize("condition_image", form.condition_image, errors);
  }

  return errors;
}

/** The exact wire payload: known fields only, plus the caller's task id. */
export function buildRequest(form: GenerationForm, taskId: string): GenerationRequest {
  const request = { task_id: taskId } as Record<string, unknown>;
  for (const key of KNOWN_FIELDS) {
    request[key] = (form as Record<string, unknown>)[key];
  }
  return request as unknown as GenerationRequest;
}
