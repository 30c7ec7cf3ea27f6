/**
 * Session state behind the page: one form shared by the tabs, the
 * result gallery, and the refinement loop that feeds results back in
 * as inputs. Every gallery entry stores the exact request that made it
 * plus the seed the server reported, so any image can be reproduced
 * bit-for-bit or used as the starting point of the next edit.
 */

import type { GenerationRequest, GenerationResult, ModelEntry } from "./api.js";
import { fromBase64, readPngSize } from "./png.js";
import type { GenerationForm } from "./validate.js";
import { emptyForm } from "./validate.js";

export type Tab = "t2i" | "i2i" | "inpaint";

export interface GalleryItem {
  image: string; // base64 PNG exactly as the server sent it
  seed: number;
  params: GenerationForm;
}

export class SessionState {
  tab: Tab = "t2i";
  form: GenerationForm = emptyForm("t2i");
  gallery: GalleryItem[] = [];
  models: ModelEntry[] = [];
  selectedModel: string | null = null;
  private taskCounter = 0;

  selectTab(tab: Tab): void {
    this.tab = tab;
    this.syncFunc();
  }

  /**
   * Recompute func_name from the tab and the controlnet fields: on the
   * i2i tab a selected ControlNet without an explicit condition map
   * upgrades to "edit", which derives its condition from the init
   * image server-side. Called when the user changes those fields;
   * reuseSeed skips it so a reused snapshot resubmits verbatim.
   */
  syncFunc(): void {
    if (this.tab === "i2i") {
      const derives = this.form.controlnet_name !== null && this.form.condition_image === null;
      this.form.func_name = derives ? "edit" : "i2i";
    } else {
      this.form.func_name = this.tab;
    }
  }

  setModels(models: ModelEntry[], servedModel: string): void {
    this.models = models;
    this.selectedModel = servedModel;
    const entry = models.find((m) => m.model_name === servedModel);
    if (entry) {
      this.form.width = entry.default_width;
      this.form.height = entry.default_height;
    }
  }

  nextTaskId(): string {
    this.taskCounter++;
    return `web-${Date.now().toString(36)}-${this.taskCounter}`;
  }

  /**
   * Record a finished generation: one gallery entry per image, each
   * snapshotting the submitted request with the server's seed folded
   * in (the request may have left seed null).
   */
  addResult(submitted: GenerationRequest, result: GenerationResult): GalleryItem[] {
    const { task_id: _task_id, ...params } = submitted;
    const added = result.images.map((image) => ({
      image,
      seed: result.seed,
      params: { ...params, seed: result.seed },
    }));
    this.gallery.push(...added);
    return added;
  }

  /** Load an item's snapshot into the form, seed pinned. */
  reuseSeed(item: GalleryItem): GenerationForm {
    this.form = { ...item.params };
    const func = item.params.func_name;
    this.tab = func === "edit" ? "i2i" : func;
    return this.form;
  }

  /**
   * Iterate on a result: it becomes the init image of the i2i tab at
   * its own size, with the prompt and guidance carried over as
   * editable defaults. The seed is left free so variations differ.
   */
  sendToI2i(item: GalleryItem): GenerationForm {
    const size = readPngSize(fromBase64(item.image));
    this.tab = "i2i";
    this.form = {
      ...item.params,
      func_name: "i2i",
      init_image: item.image,
      mask_image: null,
      condition_image: null,
      width: size.width,
      height: size.height,
      seed: null,
    };
    return this.form;
  }

  /** Same loop into the inpaint tab, starting from a cleared mask. */
  sendToInpaint(item: GalleryItem): GenerationForm {
    const form = this.sendToI2i(item);
    this.tab = "inpaint";
    form.func_name = "inpaint";
    return form;
  }
}
