/** Exporter CLI.
 *
 *   node dist/cli.js --job mnist_b --data ../data --out ../tests/fixtures
 *                    [--seed N] [--epochs N] [--val-slice N] [--force]
 *   node dist/cli.js --write-dataset ../tests/fixtures/mnist_val1k.nnxd \
 *                    --data ../data --val-slice 1000
 *
 * Writes <job>.nnxf plus <job>.manifest.json (recipe, seeds, accuracies,
 * initialization scheme) and optionally the validation-slice dataset file.
 */
import * as fs from "fs";
import * as path from "path";
import * as tf from "@tensorflow/tfjs";

import { archJson, buildModel, extractTensors } from "./arch";
import { loadSplit } from "./idx";
import { ACCURACY_SLACK_POINTS, jobTable } from "./jobs";
import { encodeDataset, encodeModel } from "./nnxf";
import { evaluateAccuracy, predictLogits, trainModel } from "./train";
import { registerWasmTrainingKernels } from "./wasm_fills";

interface Args {
  job?: string;
  data: string;
  out: string;
  seed?: number;
  epochs?: number;
  valSlice?: number;
  writeDataset?: string;
  backend: "wasm" | "cpu";
  logits?: number;
  force: boolean;
  quiet: boolean;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { data: "../data", out: ".", backend: "wasm",
                       force: false, quiet: false };
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    if (a === "--job") args.job = argv[++i];
    else if (a === "--data") args.data = argv[++i];
    else if (a === "--out") args.out = argv[++i];
    else if (a === "--seed") args.seed = Number(argv[++i]);
    else if (a === "--epochs") args.epochs = Number(argv[++i]);
    else if (a === "--val-slice") args.valSlice = Number(argv[++i]);
    else if (a === "--write-dataset") args.writeDataset = argv[++i];
    else if (a === "--backend") args.backend = argv[++i] as "wasm" | "cpu";
    else if (a === "--logits") args.logits = Number(argv[++i]);
    else if (a === "--force") args.force = true;
    else if (a === "--quiet") args.quiet = true;
    else throw new Error(`unknown argument ${a}`);
  }
  return args;
}

/** Training prefers the wasm backend (SIMD, pinned to one thread so runs are
 * reproducible); evaluation/export always happen on the plain cpu backend,
 * whose float64 op arithmetic is the canonical reference. */
async function setupBackend(name: "wasm" | "cpu"): Promise<string> {
  if (name === "wasm") {
    try {
      const wasm = require("@tensorflow/tfjs-backend-wasm");
      wasm.setWasmPaths(`${__dirname}/../node_modules/@tensorflow/tfjs-backend-wasm/dist/`);
      wasm.setThreadsCount(1);
      if (await tf.setBackend("wasm")) {
        await tf.ready();
        registerWasmTrainingKernels();
        return "wasm";
      }
    } catch {
      // fall through to cpu
    }
  }
  await tf.setBackend("cpu");
  return "cpu";
}

export async function runExport(args: Args): Promise<number> {
  if (args.writeDataset) {
    const val = loadSplit(args.data, "val");
    const n = args.valSlice ?? 1000;
    if (n > val.count) throw new Error(`validation split has only ${val.count} samples`);
    const bytes = encodeDataset(val.images.subarray(0, n * 784),
                                Array.from(val.labels.subarray(0, n)), 10, [1, 28, 28]);
    fs.mkdirSync(path.dirname(args.writeDataset), { recursive: true });
    fs.writeFileSync(args.writeDataset, bytes);
    console.log(`wrote ${args.writeDataset} (${n} samples)`);
    return 0;
  }
  if (!args.job) throw new Error("--job or --write-dataset required");
  const jobs = jobTable();
  const job = jobs[args.job];
  if (!job) throw new Error(`unknown job ${args.job}; have ${Object.keys(jobs).join(", ")}`);
  const train = loadSplit(args.data, "train");
  const val = loadSplit(args.data, "val");
  const cfg = { ...job.train };
  if (args.seed !== undefined) cfg.seed = args.seed;
  if (args.epochs !== undefined) cfg.epochs = args.epochs;

  const started = Date.now();
  const trainBackend = await setupBackend(args.backend);
  let model = buildModel(job.plan, cfg.seed);
  trainModel(model, train, cfg, (log) => {
    if (!args.quiet) {
      console.log(`epoch ${log.epoch}/${cfg.epochs} lr=${log.lr} loss=${log.loss.toFixed(4)}`);
    }
  });
  // Move the trained weights onto the cpu backend for canonical evaluation.
  const weights = model.getWeights().map((t) => ({
    shape: t.shape.slice(), data: t.dataSync() as Float32Array,
  }));
  if (trainBackend !== "cpu") {
    model.dispose();
    await tf.setBackend("cpu");
    model = buildModel(job.plan, cfg.seed);
    model.setWeights(weights.map((w) => tf.tensor(w.data, w.shape)));
  }
  const accuracy = evaluateAccuracy(model, val) * 100;
  const shortfall = job.targetAccuracy - accuracy;
  console.log(`${args.job}: validation accuracy ${accuracy.toFixed(2)}% `
    + `(target ${job.targetAccuracy}%)`);
  if (shortfall > ACCURACY_SLACK_POINTS && !args.force) {
    console.error(
      `export refused: accuracy ${accuracy.toFixed(2)}% is `
      + `${shortfall.toFixed(2)} points short of the ${job.targetAccuracy}% target `
      + `(limit ${ACCURACY_SLACK_POINTS}); re-train with another seed/recipe or --force`);
    return 1;
  }
  const tensors = extractTensors(job.plan, model);
  const bytes = encodeModel(archJson(job.plan), tensors);
  fs.mkdirSync(args.out, { recursive: true });
  const modelPath = path.join(args.out, `${args.job}.nnxf`);
  fs.writeFileSync(modelPath, bytes);
  if (args.logits) {
    const logits = predictLogits(model, val, args.logits);
    const classes = job.plan.classCount;
    const lines = ["sample,label," + Array.from({ length: classes },
                                                (_, i) => `logit_${i}`).join(",")];
    for (let i = 0; i < args.logits; i++) {
      const row = Array.from(logits.subarray(i * classes, (i + 1) * classes));
      lines.push(`${i},${val.labels[i]},${row.join(",")}`);
    }
    fs.writeFileSync(`${modelPath}.logits.csv`, lines.join("\n") + "\n");
  }
  const manifest = {
    job: args.job,
    parameters: tensors.reduce((a, t) => a + t.data.length, 0),
    validation_accuracy_percent: Number(accuracy.toFixed(4)),
    target_accuracy_percent: job.targetAccuracy,
    recipe: cfg,
    train_backend: trainBackend,
    weight_init: "glorot-uniform (framework default), per-layer seeds derived from the job seed",
    train_samples: train.count,
    val_samples: val.count,
    wall_time_s: Math.round((Date.now() - started) / 1000),
  };
  fs.writeFileSync(`${modelPath}.manifest.json`,
                   JSON.stringify(manifest, null, 1) + "\n");
  console.log(`wrote ${modelPath} (${manifest.parameters} parameters)`);
  return 0;
}

if (require.main === module) {
  runExport(parseArgs(process.argv.slice(2)))
    .then((code) => process.exit(code))
    .catch((err) => {
      console.error(String(err));
      process.exit(2);
    });
}
