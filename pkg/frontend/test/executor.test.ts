import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import { main } from "../src/cli";
import { traceStep } from "../src/executor";
import { loadModel, topologicalOrder } from "../src/model";
import { readTrace } from "../src/trace";

const FIXTURES = path.join(__dirname, "fixtures");
const MODELS = fs.readdirSync(FIXTURES).sort();

describe("model loader", () => {
  it("reads the manifest and blobs", () => {
    const model = loadModel(path.join(FIXTURES, MODELS[0]));
    expect(model.modelId).toBe(MODELS[0]);
    expect(model.lossKind).toBe("mean_squared_error");
    expect(model.inputs.shape[0]).toBe(model.batchSize);
    expect(model.nodes[0].kind).toBe("input");
    const order = topologicalOrder(model);
    expect(order.length).toBe(model.nodes.length);
  });
});

describe("executor", () => {
  it.each(MODELS)("produces a complete finite trace for %s", (name) => {
    const model = loadModel(path.join(FIXTURES, name));
    const bundle = traceStep(model);
    expect(bundle.outcome).toBe("ok");
    const names = bundle.sections.map((s) => s.name);
    // every non-source node has fc and bc; the source has bc only
    for (const node of model.nodes.slice(1)) {
      expect(names).toContain(`fc/${node.id}`);
      expect(names).toContain(`bc/${node.id}`);
    }
    expect(names).not.toContain("fc/0");
    expect(names).toContain("bc/0");
    expect(names).toContain("lc/out");
    expect(names).toContain("lc/grad");
    for (const sec of bundle.sections) {
      const count = sec.shape.reduce((a, b) => a * b, 1);
      expect(sec.data.length).toBe(count);
      for (const v of sec.data) {
        expect(Number.isFinite(v)).toBe(true);
      }
    }
  });

  it("records the loss gradient as the sink's bc section", () => {
    const model = loadModel(path.join(FIXTURES, MODELS[0]));
    const bundle = traceStep(model);
    const order = topologicalOrder(model);
    const sink = order[order.length - 1];
    const lg = bundle.sections.find((s) => s.name === "lc/grad")!;
    const bcSink = bundle.sections.find((s) => s.name === `bc/${sink}`)!;
    expect(Array.from(lg.data)).toEqual(Array.from(bcSink.data));
  });
});

describe("cli", () => {
  it("writes a readable trace and exits 0", () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "adapter-cli-"));
    const out = path.join(dir, "t.bin");
    const rc = main([
      "--model", path.join(FIXTURES, MODELS[0]),
      "--backend", "tfjs",
      "--trace-out", out,
    ]);
    expect(rc).toBe(0);
    const bundle = readTrace(out);
    expect(bundle.backendId).toBe("tfjs");
    expect(bundle.modelId).toBe(MODELS[0]);
    fs.rmSync(dir, { recursive: true, force: true });
  });

  it("writes a crash trace and exits 4 on a broken model", () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "adapter-cli-"));
    const out = path.join(dir, "t.bin");
    const rc = main(["--model", path.join(dir, "missing"), "--trace-out", out]);
    expect(rc).toBe(4);
    const bundle = readTrace(out);
    expect(bundle.outcome).toBe("crash");
    expect(bundle.message).toBeTruthy();
    fs.rmSync(dir, { recursive: true, force: true });
  });

  it("rejects unknown backends", () => {
    expect(main(["--model", "x", "--backend", "torch", "--trace-out", "y"])).toBe(2);
  });
});
