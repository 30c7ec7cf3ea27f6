/**
 * Condition-map preview: run the server's preprocessor on the current
 * image so the user sees the edge or depth map before generating.
 * Threshold sliders re-fetch; responses that arrive after a newer
 * request are dropped so the display never goes backwards.
 */

import type { PreprocessResult } from "./api.js";

export interface Preprocessor {
  preprocess(
    image: string,
    kind: "canny" | "depth" | "none",
    cannyLow?: number,
    cannyHigh?: number,
  ): Promise<PreprocessResult>;
}

export class PreviewController {
  current: PreprocessResult | null = null;
  /** Fetches issued, for tests and a subtle spinner. */
  requests = 0;
  private latest = 0;

  constructor(private readonly client: Preprocessor) {}

  /**
   * Fetch a fresh condition map. Resolves with the result, or null when
   * a newer refresh superseded this one while it was in flight.
   */
  async refresh(
    image: string,
    kind: "canny" | "depth" | "none",
    cannyLow = 0.1,
    cannyHigh = 0.3,
  ): Promise<PreprocessResult | null> {
    const ticket = ++this.latest;
    this.requests++;
    const result = await this.client.preprocess(image, kind, cannyLow, cannyHigh);
    if (ticket !== this.latest) {
      return null; // stale; a later slider move already answered
    }
    this.current = result;
    return result;
  }
}
