import { describe, expect, it } from "vitest";

import { archJson, baseFamily, lenetFamily } from "../src/arch";
import { loadSplit } from "../src/idx";
import { canonicalJson, encodeDataset, encodeModel, floatBits } from "../src/nnxf";

describe("canonical JSON", () => {
  it("sorts keys recursively and stays compact", () => {
    const bytes = canonicalJson({ b: 1, a: { d: [1, 2], c: true } });
    expect(bytes.toString()).toBe('{"a":{"c":true,"d":[1,2]},"b":1}');
  });

  it("carries float hyper-parameters as bit patterns", () => {
    expect(floatBits(0.5)).toBe(0x3f000000);
    expect(floatBits(1e-5)).toBe(0x3727c5ac);
  });
});

describe("model encoding", () => {
  it("writes the documented header", () => {
    const plan = baseFamily("b");
    const arch = archJson(plan);
    const tensors = [{ name: "conv1.weight", shape: [10, 1, 5, 5],
                       data: new Float32Array(250) }];
    const blob = encodeModel(arch, tensors);
    expect(blob.subarray(0, 4).toString("ascii")).toBe("NNXF");
    expect(blob.readUInt32LE(4)).toBe(1);
    const archLen = blob.readUInt32LE(8);
    const parsed = JSON.parse(blob.subarray(12, 12 + archLen).toString("utf8"));
    expect(parsed.class_count).toBe(10);
    expect(blob.readUInt32LE(12 + archLen)).toBe(1);
  });

  it("rejects payload/shape disagreement", () => {
    expect(() => encodeModel(archJson(baseFamily("b")),
                             [{ name: "x", shape: [3], data: new Float32Array(2) }]))
      .toThrow(/payload/);
  });

  it("declares the published parameter counts", () => {
    const count = (plan: ReturnType<typeof baseFamily>) => {
      let total = 0;
      for (const step of plan.steps) {
        if (step.kind === "conv") total += step.outCh * (step.inCh * step.k * step.k + 1);
        if (step.kind === "fc") total += step.outF * (step.inF + 1);
        if (step.kind === "conv" && step.act === "prelu") total += 1;
        if (step.kind === "fc" && step.act === "prelu") total += 1;
      }
      return total;
    };
    expect(count(baseFamily("b"))).toBe(21840);
    expect(count(baseFamily("bp", { act: "prelu" }))).toBe(21843);
    expect(count(lenetFamily("l5"))).toBe(61706);
  });
});

describe("dataset encoding", () => {
  it("lays out labels and payload per sample", () => {
    const images = new Float32Array([0.5, 0.25, 1, 0]);
    const blob = encodeDataset(images, [1, 0], 2, [2]);
    expect(blob.subarray(0, 4).toString("ascii")).toBe("NNXD");
    expect(blob.readUInt32LE(8)).toBe(2);      // samples
    expect(blob.readUInt16LE(12)).toBe(2);     // classes
    expect(blob.readUInt8(14)).toBe(1);        // rank
    expect(blob.readUInt32LE(15)).toBe(2);     // dim
    expect(blob.readUInt16LE(19)).toBe(1);     // first label
    expect(blob.readFloatLE(21)).toBeCloseTo(0.5);
  });
});

describe("digit archives", () => {
  it("loads both splits with consistent counts", () => {
    const train = loadSplit(`${__dirname}/../../data`, "train");
    const val = loadSplit(`${__dirname}/../../data`, "val");
    expect(train.count).toBe(8000);
    expect(val.count).toBe(2000);
    expect(train.images.length).toBe(8000 * 784);
    // pixels are u8/255 in [0,1]
    let max = 0;
    for (let i = 0; i < 784; i++) max = Math.max(max, train.images[i]);
    expect(max).toBeLessThanOrEqual(1);
    // validation split is balanced: 200 per class
    const counts = new Array(10).fill(0);
    for (const label of val.labels) counts[label] += 1;
    expect(counts).toEqual(new Array(10).fill(200));
  });
});
