/** Loader for the archfuzz model directory format (model.json + f32 blobs). */
import * as fs from "node:fs";
import * as path from "node:path";

export interface NodeSpec {
  id: number;
  kind: string;
  params: Record<string, unknown>;
  shape: number[]; // per-sample shape, batch dimension excluded
}

export interface Blob {
  shape: number[];
  data: Float32Array;
}

export interface Model {
  modelId: string;
  lossKind: string;
  batchSize: number;
  nodes: NodeSpec[];
  edges: Array<[number, number]>;
  inputs: Blob;
  labels: Blob;
  weights: Map<number, Blob[]>;
}

const FORMAT_VERSION = 1;

function readBlob(dir: string, ref: { file: string; dtype: string; shape: number[] }): Blob {
  if (ref.dtype !== "f32") {
    throw new Error(`unsupported blob dtype ${ref.dtype}`);
  }
  const raw = fs.readFileSync(path.join(dir, ref.file));
  const count = ref.shape.reduce((a, b) => a * b, 1);
  if (raw.length !== count * 4) {
    throw new Error(`blob ${ref.file}: length ${raw.length} != ${count * 4}`);
  }
  // copy so the Float32Array is not offset into the Buffer pool
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = raw.readFloatLE(i * 4);
  }
  return { shape: ref.shape, data };
}

export function loadModel(dir: string): Model {
  const manifest = JSON.parse(fs.readFileSync(path.join(dir, "model.json"), "utf-8"));
  if (manifest.format_version !== FORMAT_VERSION) {
    throw new Error(`unsupported model format version ${manifest.format_version}`);
  }
  const weights = new Map<number, Blob[]>();
  for (const [nid, refs] of Object.entries(manifest.weights)) {
    weights.set(Number(nid), (refs as any[]).map((r) => readBlob(dir, r)));
  }
  return {
    modelId: manifest.model_id,
    lossKind: manifest.loss_kind,
    batchSize: manifest.batch_size,
    nodes: manifest.nodes.map((n: any) => ({
      id: n.id,
      kind: n.kind,
      params: n.params ?? {},
      shape: n.shape,
    })),
    edges: manifest.edges.map((e: number[]) => [e[0], e[1]] as [number, number]),
    inputs: readBlob(dir, manifest.inputs),
    labels: readBlob(dir, manifest.labels),
    weights,
  };
}

/** Predecessor lists keyed by node id, edge order preserved. */
export function predMap(model: Model): Map<number, number[]> {
  const preds = new Map<number, number[]>(model.nodes.map((n) => [n.id, []]));
  for (const [from, to] of model.edges) {
    preds.get(to)!.push(from);
  }
  return preds;
}

/** Kahn topological order over node ids. */
export function topologicalOrder(model: Model): number[] {
  const preds = predMap(model);
  const indegree = new Map<number, number>();
  const succs = new Map<number, number[]>(model.nodes.map((n) => [n.id, []]));
  for (const [id, ps] of preds) {
    indegree.set(id, ps.length);
  }
  for (const [from, to] of model.edges) {
    succs.get(from)!.push(to);
  }
  const ready = model.nodes.map((n) => n.id).filter((id) => indegree.get(id) === 0);
  ready.sort((a, b) => a - b);
  const order: number[] = [];
  while (ready.length > 0) {
    const id = ready.shift()!;
    order.push(id);
    for (const s of succs.get(id)!) {
      const d = indegree.get(s)! - 1;
      indegree.set(s, d);
      if (d === 0) {
        // keep ascending-id tie-break for determinism
        const at = ready.findIndex((r) => r > s);
        ready.splice(at === -1 ? ready.length : at, 0, s);
      }
    }
  }
  if (order.length !== model.nodes.length) {
    throw new Error("model graph contains a cycle");
  }
  return order;
}
