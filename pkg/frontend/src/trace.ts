/** Writer/reader for the archfuzz binary trace container.
 *
 * Layout: magic "AFZT", u32 LE version, u32 LE manifest length, UTF-8 JSON
 * manifest, then concatenated little-endian float32 blobs.
 */
import * as fs from "node:fs";

export const TRACE_MAGIC = "AFZT";
export const TRACE_VERSION = 1;

export interface Section {
  name: string;
  shape: number[];
  data: Float32Array;
}

export interface TraceBundle {
  backendId: string;
  modelId: string;
  outcome: "ok" | "nan" | "crash";
  nodes: Record<string, { kind: string; preds: number[] }>;
  firstNonfiniteNode: number | null;
  firstNonfiniteSection: string | null;
  message: string | null;
  sections: Section[];
}

export function writeTrace(bundle: TraceBundle, path: string): void {
  const sectionMeta: object[] = [];
  const blobs: Buffer[] = [];
  let offset = 0;
  for (const sec of bundle.sections) {
    const raw = Buffer.alloc(sec.data.length * 4);
    for (let i = 0; i < sec.data.length; i++) {
      raw.writeFloatLE(sec.data[i], i * 4);
    }
    sectionMeta.push({
      name: sec.name,
      shape: sec.shape,
      offset,
      nbytes: raw.length,
    });
    blobs.push(raw);
    offset += raw.length;
  }
  const manifest = Buffer.from(
    JSON.stringify({
      backend_id: bundle.backendId,
      model_id: bundle.modelId,
      outcome: bundle.outcome,
      nodes: bundle.nodes,
      first_nonfinite_node: bundle.firstNonfiniteNode,
      first_nonfinite_section: bundle.firstNonfiniteSection,
      message: bundle.message,
      sections: sectionMeta,
    }),
    "utf-8",
  );
  const header = Buffer.alloc(12);
  header.write(TRACE_MAGIC, 0, "ascii");
  header.writeUInt32LE(TRACE_VERSION, 4);
  header.writeUInt32LE(manifest.length, 8);
  fs.writeFileSync(path, Buffer.concat([header, manifest, ...blobs]));
}

export function readTrace(path: string): TraceBundle {
  const raw = fs.readFileSync(path);
  if (raw.length < 12 || raw.toString("ascii", 0, 4) !== TRACE_MAGIC) {
    throw new Error(`${path}: not a trace file (bad magic)`);
  }
  const version = raw.readUInt32LE(4);
  if (version !== TRACE_VERSION) {
    throw new Error(`${path}: unsupported trace version ${version}`);
  }
  const mlen = raw.readUInt32LE(8);
  if (raw.length < 12 + mlen) {
    throw new Error(`${path}: truncated manifest`);
  }
  const manifest = JSON.parse(raw.toString("utf-8", 12, 12 + mlen));
  const body = raw.subarray(12 + mlen);
  const sections: Section[] = [];
  for (const sec of manifest.sections) {
    const count = sec.shape.reduce((a: number, b: number) => a * b, 1);
    if (sec.nbytes !== count * 4) {
      throw new Error(`${path}: section ${sec.name} byte count mismatch`);
    }
    if (sec.offset + sec.nbytes > body.length) {
      throw new Error(`${path}: section ${sec.name} truncated`);
    }
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      data[i] = body.readFloatLE(sec.offset + i * 4);
    }
    sections.push({ name: sec.name, shape: sec.shape, data });
  }
  return {
    backendId: manifest.backend_id,
    modelId: manifest.model_id,
    outcome: manifest.outcome,
    nodes: manifest.nodes ?? {},
    firstNonfiniteNode: manifest.first_nonfinite_node ?? null,
    firstNonfiniteSection: manifest.first_nonfinite_section ?? null,
    message: manifest.message ?? null,
    sections,
  };
}
