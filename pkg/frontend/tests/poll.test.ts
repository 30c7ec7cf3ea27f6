import { createServer, type Server } from "node:http";
import type { AddressInfo } from "node:net";
import { afterEach, describe, expect, it } from "vitest";

import { Client } from "../src/api.js";
import { TaskFailed, TaskTracker } from "../src/poll.js";
import { emptyForm, buildRequest } from "../src/validate.js";

/**
 * Scripted stand-in for the task endpoints: every submission is
 * accepted, and each task reports "running" a fixed number of times
 * before settling. Counts how many status requests are in flight at
 * once, which is the property under test.
 */
class StubTasks {
  server: Server;
  baseUrl = "";
  polls = 0;
  inFlight = 0;
  maxInFlight = 0;
  failAll = false;
  private counter = 0;
  private remaining = new Map<string, { left: number; fail: boolean }>();

  constructor(private readonly pollsUntilDone: number) {
    this.server = createServer((req, res) => {
      const url = req.url ?? "";
      if (req.method === "POST" && url === "/tasks") {
        const id = `srv-${++this.counter}`;
        this.remaining.set(id, { left: this.pollsUntilDone, fail: this.failAll });
        res.setHeader("content-type", "application/json");
        res.end(JSON.stringify({ task_id: id, status: "queued" }));
        return;
      }
      if (req.method === "GET" && url.startsWith("/tasks/")) {
        this.polls++;
        this.inFlight++;
        this.maxInFlight = Math.max(this.maxInFlight, this.inFlight);
        const id = url.slice("/tasks/".length);
        const task = this.remaining.get(id)!;
        // hold the response long enough for concurrent polls to overlap
        setTimeout(() => {
          this.inFlight--;
          task.left--;
          const view =
            task.left > 0
              ? { task_id: id, status: "running", submitted_at: 0 }
              : task.fail
                ? {
                    task_id: id,
                    status: "failed",
                    submitted_at: 0,
                    result: {
                      task_id: id,
                      success: false,
                      images: [],
                      seed: 0,
                      elapsed_ms: 1,
                      error: "out of space",
                    },
                  }
                : {
                    task_id: id,
                    status: "done",
                    submitted_at: 0,
                    result: { task_id: id, success: true, images: ["aaaa"], seed: 1, elapsed_ms: 1 },
                  };
          res.setHeader("content-type", "application/json");
          res.end(JSON.stringify(view));
        }, 30);
        return;
      }
      res.statusCode = 404;
      res.end(JSON.stringify({ detail: "no such route" }));
    });
  }

  async start(): Promise<void> {
    await new Promise<void>((resolve) => this.server.listen(0, "127.0.0.1", resolve));
    const addr = this.server.address() as AddressInfo;
    this.baseUrl = `http://127.0.0.1:${addr.port}`;
  }

  async stop(): Promise<void> {
    await new Promise<void>((resolve) => this.server.close(() => resolve()));
  }
}

describe("TaskTracker", () => {
  let stub: StubTasks | null = null;

  afterEach(async () => {
    await stub?.stop();
    stub = null;
  });

  it("resolves with the result once the task is done", async () => {
    stub = new StubTasks(2);
    await stub.start();
    const tracker = new TaskTracker(new Client(stub.baseUrl), 20);
    const result = await tracker.run(buildRequest(emptyForm(), "web-1"));
    expect(result.images).toEqual(["aaaa"]);
    expect(tracker.outstanding()).toBe(0);
    expect(stub.polls).toBe(2);
  });

  it("rejects with the server's error when the task fails", async () => {
    stub = new StubTasks(1);
    stub.failAll = true;
    await stub.start();
    const tracker = new TaskTracker(new Client(stub.baseUrl), 20);
    await expect(tracker.run(buildRequest(emptyForm(), "web-1"))).rejects.toThrow(TaskFailed);
    await expect(tracker.run(buildRequest(emptyForm(), "web-2"))).rejects.toThrow("out of space");
    expect(tracker.outstanding()).toBe(0);
  });

  it("never polls more than once per outstanding task", async () => {
    stub = new StubTasks(5);
    await stub.start();
    const tracker = new TaskTracker(new Client(stub.baseUrl), 10);
    const runs = Array.from({ length: 5 }, (_, i) =>
      tracker.run(buildRequest(emptyForm(), `web-${i}`)),
    );
    await Promise.all(runs);
    expect(stub.polls).toBe(25);
    expect(stub.maxInFlight).toBeLessThanOrEqual(5);
    expect(tracker.outstanding()).toBe(0);
  });

  it("gives up after the configured wait", async () => {
    stub = new StubTasks(10_000);
    await stub.start();
    const tracker = new TaskTracker(new Client(stub.baseUrl), 10, 120);
    await expect(tracker.run(buildRequest(emptyForm(), "web-1"))).rejects.toThrow(
      /no result after/,
    );
  });
});
