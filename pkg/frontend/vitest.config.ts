import { defineConfig } from "vitest/config";

// The workflow suites boot the real Python server and run actual
// generations; generous timeouts keep slow machines from flaking.
export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
