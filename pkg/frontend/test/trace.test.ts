import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { readTrace, writeTrace, TraceBundle } from "../src/trace";

let dir: string;
beforeEach(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), "adapter-trace-"));
});
afterEach(() => {
  fs.rmSync(dir, { recursive: true, force: true });
});

function sampleBundle(): TraceBundle {
  return {
    backendId: "tfjs",
    modelId: "m0001",
    outcome: "nan",
    nodes: {
      "0": { kind: "input", preds: [] },
      "1": { kind: "relu", preds: [0] },
    },
    firstNonfiniteNode: 1,
    firstNonfiniteSection: "fc",
    message: null,
    sections: [
      {
        name: "fc/1",
        shape: [1, 4],
        data: new Float32Array([1.5, NaN, -Infinity, -0]),
      },
      { name: "lc/out", shape: [1], data: new Float32Array([Math.PI]) },
    ],
  };
}

describe("trace container", () => {
  it("round-trips metadata and special float values bit-identically", () => {
    const file = path.join(dir, "t.bin");
    const bundle = sampleBundle();
    writeTrace(bundle, file);
    const back = readTrace(file);
    expect(back.backendId).toBe("tfjs");
    expect(back.outcome).toBe("nan");
    expect(back.firstNonfiniteNode).toBe(1);
    expect(back.nodes).toEqual(bundle.nodes);
    const fc = back.sections.find((s) => s.name === "fc/1")!;
    expect(fc.shape).toEqual([1, 4]);
    expect(fc.data[0]).toBe(1.5);
    expect(Number.isNaN(fc.data[1])).toBe(true);
    expect(fc.data[2]).toBe(-Infinity);
    expect(Object.is(fc.data[3], -0)).toBe(true);
  });

  it("starts with the expected header bytes", () => {
    const file = path.join(dir, "t.bin");
    writeTrace(sampleBundle(), file);
    const raw = fs.readFileSync(file);
    expect(raw.toString("ascii", 0, 4)).toBe("AFZT");
    expect(raw.readUInt32LE(4)).toBe(1);
  });

  it("rejects a bad magic", () => {
    const file = path.join(dir, "bad.bin");
    fs.writeFileSync(file, Buffer.from("NOPE00000000"));
    expect(() => readTrace(file)).toThrow(/magic/);
  });

  it("rejects a truncated body", () => {
    const file = path.join(dir, "t.bin");
    writeTrace(sampleBundle(), file);
    const raw = fs.readFileSync(file);
    fs.writeFileSync(file, raw.subarray(0, raw.length - 4));
    expect(() => readTrace(file)).toThrow(/truncated/);
  });
});
