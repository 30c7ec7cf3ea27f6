/**
 * Async generation through /tasks. Each submitted task runs one
 * sequential poll loop, so the server sees at most one status request
 * per outstanding task at any moment, no matter how many results are
 * pending.
 */

import type { Client, GenerationRequest, GenerationResult } from "./api.js";

const POLL_INTERVAL_MS = 400;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class TaskFailed extends Error {
  constructor(readonly detail: string) {
    super(detail);
    this.name = "TaskFailed";
  }
}

export class TaskTracker {
  private pending = 0;

  constructor(
    private readonly client: Client,
    private readonly intervalMs: number = POLL_INTERVAL_MS,
    private readonly maxWaitMs: number = 10 * 60 * 1000,
  ) {}

  /** Tasks submitted and not yet finished (equals active poll loops). */
  outstanding(): number {
    return this.pending;
  }

  /** Submit, poll to completion, resolve with the finished result. */
  async run(request: GenerationRequest): Promise<GenerationResult> {
    const submitted = await this.client.submitTask(request);
    this.pending++;
    try {
      const started = Date.now();
      while (true) {
        await sleep(this.intervalMs);
        const view = await this.client.task(submitted.task_id);
        if (view.status === "done" && view.result) {
          return view.result;
        }
        if (view.status === "failed") {
          throw new TaskFailed(view.result?.error ?? "generation failed");
        }
        if (Date.now() - started > this.maxWaitMs) {
          throw new TaskFailed(`no result after ${this.maxWaitMs}ms`);
        }
      }
    } finally {
      this.pending--;
    }
  }
}
