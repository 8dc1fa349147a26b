import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the full training job runs inside the suite; give it room
    testTimeout: 3_600_000,
    hookTimeout: 120_000,
    pool: "forks",
    fileParallelism: false,
  },
});
