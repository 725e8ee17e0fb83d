/** One training step on TensorFlow.js, recorded as an archfuzz trace.
 *
 * Gradient capture uses the zero-variable trick: every node output gets a
 * zero-initialized variable added to it, so the gradient of the loss with
 * respect to that variable equals the gradient with respect to the node
 * output, which is exactly what the bc/ sections record.
 */
import * as tf from "@tensorflow/tfjs";

import { Blob, Model, NodeSpec, predMap, topologicalOrder } from "./model";
import { Section, TraceBundle } from "./trace";

export const BACKEND_ID = "tfjs";

function toTensor(blob: Blob): tf.Tensor {
  return tf.tensor(blob.data, blob.shape, "float32");
}

function asIntPair(v: unknown): [number, number] {
  const n = Number(v);
  return [n, n];
}

function applyKernel(
  node: NodeSpec,
  inputs: tf.Tensor[],
  weights: tf.Tensor[],
): tf.Tensor {
  const p = node.params as Record<string, any>;
  switch (node.kind) {
    case "dense": {
      const x = inputs[0];
      const inDim = x.shape[x.shape.length - 1];
      const flat = x.reshape([-1, inDim]);
      const out = flat.matMul(weights[0] as tf.Tensor2D).add(weights[1]);
      return out.reshape([...x.shape.slice(0, -1), Number(p.units)]);
    }
    case "conv2d": {
      const out = tf.conv2d(
        inputs[0] as tf.Tensor4D,
        weights[0] as tf.Tensor4D,
        asIntPair(p.strides),
        p.padding as "same" | "valid",
      );
      return out.add(weights[1]);
    }
    case "max_pooling2d":
      return tf.maxPool(
        inputs[0] as tf.Tensor4D,
        asIntPair(p.pool_size),
        asIntPair(p.strides),
        p.padding as "same" | "valid",
      );
    case "global_average_pooling2d":
      return inputs[0].mean([1, 2]);
    case "flatten":
      return inputs[0].reshape([inputs[0].shape[0], -1]);
    case "reshape":
      return inputs[0].reshape([inputs[0].shape[0], ...(p.target as number[])]);
    case "relu":
      return tf.relu(inputs[0]);
    case "tanh":
      return tf.tanh(inputs[0]);
    case "sigmoid":
      return tf.sigmoid(inputs[0]);
    case "softmax":
      return tf.softmax(inputs[0]);
    case "add":
      return tf.addN(inputs);
    case "average":
      return tf.addN(inputs).div(inputs.length);
    case "concatenate":
      return tf.concat(inputs, -1);
    default:
      throw new Error(`layer kind ${node.kind} is not mapped to tfjs`);
  }
}

function lossValue(kind: string, pred: tf.Tensor, labels: tf.Tensor): tf.Scalar {
  switch (kind) {
    case "mean_squared_error":
      return pred.sub(labels).square().mean();
    default:
      throw new Error(`loss kind ${kind} is not mapped to tfjs`);
  }
}

interface StepTensors {
  fc: Map<number, tf.Tensor>;
  loss: tf.Scalar;
  bc: Map<number, tf.Tensor>;
}

export function runStep(model: Model): StepTensors {
  const preds = predMap(model);
  const order = topologicalOrder(model);
  const byId = new Map(model.nodes.map((n) => [n.id, n]));
  const inputTensor = toTensor(model.inputs);
  const labels = toTensor(model.labels);
  const batch = model.batchSize;

  const probes = new Map<number, tf.Variable>();
  const probeOwner = new Map<string, number>();
  for (const id of order) {
    const node = byId.get(id)!;
    const v = tf.variable(tf.zeros([batch, ...node.shape]), true, `probe_${id}`);
    probes.set(id, v);
    probeOwner.set(v.name, id);
  }

  const fc = new Map<number, tf.Tensor>();
  const compute = (): tf.Scalar => {
    const outputs = new Map<number, tf.Tensor>();
    for (const id of order) {
      const node = byId.get(id)!;
      let raw: tf.Tensor;
      if (preds.get(id)!.length === 0) {
        raw = inputTensor;
      } else {
        const ins = preds.get(id)!.map((pid) => outputs.get(pid)!);
        const ws = (model.weights.get(id) ?? []).map(toTensor);
        raw = applyKernel(node, ins, ws);
      }
      const out = raw.add(probes.get(id)!);
      outputs.set(id, out);
      // variableGrads runs this closure inside a tidy; keep the forward
      // tensors alive so they can be serialized afterwards
      fc.set(id, tf.keep(out));
    }
    const sink = order[order.length - 1];
    return lossValue(model.lossKind, outputs.get(sink)!, labels);
  };

  const { value, grads } = tf.variableGrads(compute, [...probes.values()]);
  const bc = new Map<number, tf.Tensor>();
  for (const [name, grad] of Object.entries(grads)) {
    bc.set(probeOwner.get(name)!, grad);
  }
  // unregister the probe variables so repeated steps in one process
  // do not collide on variable names
  for (const v of probes.values()) {
    v.dispose();
  }
  return { fc, loss: value, bc };
}

function sectionFromTensor(name: string, t: tf.Tensor): Section {
  return { name, shape: t.shape, data: t.dataSync() as Float32Array };
}

export function traceStep(model: Model): TraceBundle {
  const preds = predMap(model);
  const order = topologicalOrder(model);
  const nodesMeta: Record<string, { kind: string; preds: number[] }> = {};
  for (const n of model.nodes) {
    nodesMeta[String(n.id)] = { kind: n.kind, preds: preds.get(n.id)! };
  }
  const sink = order[order.length - 1];

  const step = runStep(model);
  const sections: Section[] = [];
  // the source pseudo-node carries raw data, not a computation: no fc section
  for (const id of order) {
    if (preds.get(id)!.length > 0) {
      sections.push(sectionFromTensor(`fc/${id}`, step.fc.get(id)!));
    }
  }
  sections.push(sectionFromTensor("lc/out", step.loss.reshape([1])));
  sections.push(sectionFromTensor("lc/grad", step.bc.get(sink)!));
  for (const id of order) {
    sections.push(sectionFromTensor(`bc/${id}`, step.bc.get(id)!));
  }

  // earliest non-finite value in trace order determines the outcome
  let outcome: TraceBundle["outcome"] = "ok";
  let firstNode: number | null = null;
  let firstSection: string | null = null;
  outer: for (const sec of sections) {
    for (const v of sec.data) {
      if (!Number.isFinite(v)) {
        outcome = "nan";
        const [kind, id] = sec.name.split("/");
        firstSection = kind;
        firstNode = kind === "lc" ? sink : Number(id);
        break outer;
      }
    }
  }

  return {
    backendId: BACKEND_ID,
    modelId: model.modelId,
    outcome,
    nodes: nodesMeta,
    firstNonfiniteNode: firstNode,
    firstNonfiniteSection: firstSection,
    message: null,
    sections,
  };
}

export function crashTrace(modelId: string, message: string): TraceBundle {
  return {
    backendId: BACKEND_ID,
    modelId,
    outcome: "crash",
    nodes: {},
    firstNonfiniteNode: null,
    firstNonfiniteSection: null,
    message,
    sections: [],
  };
}
