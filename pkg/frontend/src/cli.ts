#!/usr/bin/env node
/** adapter --model <dir> --backend <name> --trace-out <file>
 *
 * Exit codes follow the archfuzz runner contract: 0 ok, 3 non-finite
 * values in the trace, 4 caught failure (crash trace written).
 */
import { parseArgs } from "node:util";
import * as path from "node:path";

import { BACKEND_ID, crashTrace, traceStep } from "./executor";
import { loadModel } from "./model";
import { writeTrace } from "./trace";

export function main(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      model: { type: "string" },
      backend: { type: "string" },
      "trace-out": { type: "string" },
    },
  });
  const modelDir = values.model;
  const backend = values.backend ?? BACKEND_ID;
  const traceOut = values["trace-out"];
  if (!modelDir || !traceOut) {
    process.stderr.write("usage: adapter --model <dir> --backend <name> --trace-out <file>\n");
    return 2;
  }
  if (backend !== BACKEND_ID) {
    process.stderr.write(`unknown backend ${backend} (only ${BACKEND_ID} is available)\n`);
    return 2;
  }

  let modelId = path.basename(modelDir);
  try {
    const model = loadModel(modelDir);
    modelId = model.modelId;
    const bundle = traceStep(model);
    writeTrace(bundle, traceOut);
    return bundle.outcome === "nan" ? 3 : 0;
  } catch (err) {
    const message = err instanceof Error ? err.message : String(err);
    writeTrace(crashTrace(modelId, message), traceOut);
    process.stderr.write(message + "\n");
    return 4;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
