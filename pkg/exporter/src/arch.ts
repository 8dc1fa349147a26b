/** Architecture plans: one table drives the tfjs model, the exchange-format
 * architecture JSON, and the weight extraction/permutation on export.
 *
 * The training framework is channels-last; the exchange format and analysis
 * engine are channels-first with (out, in, kh, kw) conv kernels and (out, in)
 * dense kernels, so conv kernels transpose on export and the first dense
 * layer after a flatten additionally permutes its input columns from
 * (h, w, c) order to (c, h, w) order.
 */
import * as tf from "@tensorflow/tfjs";

import { ArchJson, Activation, LayerJson, TensorOut, floatBits } from "./nnxf";

export type PlanStep =
  | { kind: "conv"; name: string; inCh: number; outCh: number; k: number;
      stride: number; pad: number; act: Activation }
  | { kind: "maxpool"; name: string; size: number }
  | { kind: "flatten"; name: string }
  | { kind: "fc"; name: string; inF: number; outF: number; act: Activation }
  | { kind: "dropout"; name: string; rate: number; act: Activation }
  | { kind: "batchnorm"; name: string; features: number; act: Activation };

export interface ArchPlan {
  name: string;
  classCount: number;
  inputShape: [number, number, number]; // (c, h, w)
  steps: PlanStep[];
}

function convOut(size: number, k: number, stride: number, pad: number): number {
  return Math.floor((size + 2 * pad - k) / stride) + 1;
}

/** Base family: two strided convs then two dense layers. */
export function baseFamily(name: string, opts: {
  width?: number; act?: "relu" | "prelu"; dropout?: boolean; batchnorm?: boolean;
} = {}): ArchPlan {
  const w = opts.width ?? 1;
  const act: Activation = opts.act ?? "relu";
  const c1 = 10 * w, c2 = 20 * w, fc = 50 * w;
  const h1 = convOut(28, 5, 2, 0);       // 12
  const h2 = convOut(h1, 5, 2, 0);       // 4
  const steps: PlanStep[] = [];
  const convAct = opts.batchnorm ? "none" : act;
  steps.push({ kind: "conv", name: "conv1", inCh: 1, outCh: c1, k: 5, stride: 2, pad: 0,
               act: convAct });
  if (opts.batchnorm) steps.push({ kind: "batchnorm", name: "bn1", features: c1, act });
  steps.push({ kind: "conv", name: "conv2", inCh: c1, outCh: c2, k: 5, stride: 2, pad: 0,
               act: opts.batchnorm || opts.dropout ? "none" : act });
  if (opts.batchnorm) steps.push({ kind: "batchnorm", name: "bn2", features: c2, act });
  if (opts.dropout || opts.batchnorm) {
    steps.push({ kind: "dropout", name: "drop1", rate: 0.5,
                 act: opts.batchnorm ? "none" : act });
  }
  steps.push({ kind: "flatten", name: "flatten" });
  steps.push({ kind: "fc", name: "fc1", inF: c2 * h2 * h2, outF: fc, act });
  if (opts.dropout || opts.batchnorm) {
    steps.push({ kind: "dropout", name: "drop2", rate: 0.5, act: "none" });
  }
  steps.push({ kind: "fc", name: "fc2", inF: fc, outF: 10, act: "softmax" });
  return { name, classCount: 10, inputShape: [1, 28, 28], steps };
}

/** Classic five-layer convnet: three convs with pooling, two dense layers. */
export function lenetFamily(name: string, opts: { dropout?: boolean } = {}): ArchPlan {
  const steps: PlanStep[] = [
    { kind: "conv", name: "conv1", inCh: 1, outCh: 6, k: 5, stride: 1, pad: 2, act: "relu" },
    { kind: "maxpool", name: "pool1", size: 2 },
    { kind: "conv", name: "conv2", inCh: 6, outCh: 16, k: 5, stride: 1, pad: 0, act: "relu" },
    { kind: "maxpool", name: "pool2", size: 2 },
    { kind: "conv", name: "conv3", inCh: 16, outCh: 120, k: 5, stride: 1, pad: 0, act: "relu" },
  ];
  if (opts.dropout) steps.push({ kind: "dropout", name: "drop1", rate: 0.5, act: "none" });
  steps.push({ kind: "flatten", name: "flatten" });
  steps.push({ kind: "fc", name: "fc1", inF: 120, outF: 84, act: "relu" });
  if (opts.dropout) steps.push({ kind: "dropout", name: "drop2", rate: 0.5, act: "none" });
  steps.push({ kind: "fc", name: "fc2", inF: 84, outF: 10, act: "softmax" });
  return { name, classCount: 10, inputShape: [1, 28, 28], steps };
}

export function archJson(plan: ArchPlan): ArchJson {
  const layers: LayerJson[] = [];
  for (const step of plan.steps) {
    if (step.kind === "conv") {
      layers.push({ name: step.name, kind: "conv", activation: step.act,
                    in_channels: step.inCh, out_channels: step.outCh,
                    kernel: [step.k, step.k], stride: [step.stride, step.stride],
                    padding: [step.pad, step.pad], bias: true });
    } else if (step.kind === "maxpool") {
      layers.push({ name: step.name, kind: "maxpool", activation: "none",
                    pool: [step.size, step.size], pool_stride: [step.size, step.size] });
    } else if (step.kind === "flatten") {
      layers.push({ name: step.name, kind: "flatten", activation: "none" });
    } else if (step.kind === "fc") {
      layers.push({ name: step.name, kind: "fc", activation: step.act,
                    in_features: step.inF, out_features: step.outF, bias: true });
    } else if (step.kind === "dropout") {
      layers.push({ name: step.name, kind: "dropout", activation: step.act,
                    rate_bits: floatBits(step.rate) });
    } else {
      layers.push({ name: step.name, kind: "batchnorm", activation: step.act,
                    features: step.features, eps_bits: floatBits(1e-5) });
    }
  }
  return { class_count: plan.classCount, input_shape: [...plan.inputShape], layers };
}

export function buildModel(plan: ArchPlan, seed: number): tf.Sequential {
  const model = tf.sequential();
  let first = true;
  let layerSeed = seed * 1000;
  const addAct = (act: Activation, name: string, rank: number) => {
    if (act === "relu") {
      model.add(tf.layers.reLU({ name: `${name}_relu` }));
    } else if (act === "prelu") {
      // One shared slope per layer; initialized like the usual framework default.
      const axes = rank === 4 ? [1, 2, 3] : [1];
      model.add(tf.layers.prelu({
        name: `${name}_alpha`,
        alphaInitializer: tf.initializers.constant({ value: 0.25 }),
        sharedAxes: axes,
      }));
    } else if (act !== "none" && act !== "softmax") {
      throw new Error(`unsupported training activation ${act}`);
    }
  };
  for (const step of plan.steps) {
    const inputShape = first
      ? ([plan.inputShape[1], plan.inputShape[2], plan.inputShape[0]] as number[])
      : undefined;
    first = false;
    if (step.kind === "conv") {
      model.add(tf.layers.conv2d({
        name: step.name, filters: step.outCh, kernelSize: step.k,
        strides: step.stride, padding: step.pad > 0 ? "same" : "valid",
        kernelInitializer: tf.initializers.glorotUniform({ seed: layerSeed++ }),
        useBias: true, inputShape,
      }));
      addAct(step.act, step.name, 4);
    } else if (step.kind === "maxpool") {
      model.add(tf.layers.maxPooling2d({ name: step.name, poolSize: step.size,
                                         strides: step.size }));
    } else if (step.kind === "flatten") {
      model.add(tf.layers.flatten({ name: step.name, inputShape }));
    } else if (step.kind === "fc") {
      model.add(tf.layers.dense({
        name: step.name, units: step.outF,
        kernelInitializer: tf.initializers.glorotUniform({ seed: layerSeed++ }),
        useBias: true, inputShape,
      }));
      addAct(step.act, step.name, 2);
    } else if (step.kind === "dropout") {
      model.add(tf.layers.dropout({ name: step.name, rate: step.rate, seed: layerSeed++ }));
      addAct(step.act, step.name, 4);
    } else {
      model.add(tf.layers.batchNormalization({ name: step.name, epsilon: 1e-5,
                                               momentum: 0.9 }));
      addAct(step.act, step.name, 4);
    }
  }
  return model;
}

/** Column permutation mapping (c,h,w)-flat indices to (h,w,c)-flat indices. */
function flattenPermutation(c: number, h: number, w: number): Int32Array {
  const perm = new Int32Array(c * h * w);
  let i = 0;
  for (let cc = 0; cc < c; cc++) {
    for (let hh = 0; hh < h; hh++) {
      for (let ww = 0; ww < w; ww++) {
        perm[i++] = hh * (w * c) + ww * c + cc;
      }
    }
  }
  return perm;
}

export function extractTensors(plan: ArchPlan, model: tf.Sequential): TensorOut[] {
  const out: TensorOut[] = [];
  let shape: [number, number, number] = [...plan.inputShape];
  let flatPerm: Int32Array | null = null;
  const weightsOf = (name: string): Float32Array[] =>
    model.getLayer(name).getWeights().map((t) => t.dataSync() as Float32Array);
  for (const step of plan.steps) {
    if (step.kind === "conv") {
      const [kernel, bias] = weightsOf(step.name);
      const [kh, kw, inCh, outCh] = [step.k, step.k, step.inCh, step.outCh];
      const data = new Float32Array(outCh * inCh * kh * kw);
      // (kh, kw, in, out) -> (out, in, kh, kw)
      for (let o = 0; o < outCh; o++) {
        for (let c = 0; c < inCh; c++) {
          for (let y = 0; y < kh; y++) {
            for (let x = 0; x < kw; x++) {
              data[((o * inCh + c) * kh + y) * kw + x] =
                kernel[((y * kw + x) * inCh + c) * outCh + o];
            }
          }
        }
      }
      out.push({ name: `${step.name}.weight`, shape: [outCh, inCh, kh, kw], data });
      out.push({ name: `${step.name}.bias`, shape: [outCh], data: bias });
      if (step.act === "prelu") out.push(extractAlpha(model, step.name));
      shape = [step.outCh,
               convOut(shape[1], step.k, step.stride, step.pad),
               convOut(shape[2], step.k, step.stride, step.pad)];
    } else if (step.kind === "maxpool") {
      shape = [shape[0], Math.floor(shape[1] / step.size), Math.floor(shape[2] / step.size)];
    } else if (step.kind === "flatten") {
      flatPerm = flattenPermutation(shape[0], shape[1], shape[2]);
    } else if (step.kind === "fc") {
      const [kernel, bias] = weightsOf(step.name);
      const data = new Float32Array(step.outF * step.inF);
      for (let o = 0; o < step.outF; o++) {
        for (let i = 0; i < step.inF; i++) {
          const col = flatPerm ? flatPerm[i] : i;
          data[o * step.inF + i] = kernel[col * step.outF + o];
        }
      }
      out.push({ name: `${step.name}.weight`, shape: [step.outF, step.inF], data });
      out.push({ name: `${step.name}.bias`, shape: [step.outF], data: bias });
      if (step.act === "prelu") out.push(extractAlpha(model, step.name));
      flatPerm = null;
    } else if (step.kind === "batchnorm") {
      const [gamma, beta, mean, variance] = weightsOf(step.name);
      out.push({ name: `${step.name}.gamma`, shape: [step.features], data: gamma });
      out.push({ name: `${step.name}.beta`, shape: [step.features], data: beta });
      out.push({ name: `${step.name}.running_mean`, shape: [step.features], data: mean });
      out.push({ name: `${step.name}.running_var`, shape: [step.features], data: variance });
      if (step.act === "prelu") out.push(extractAlpha(model, step.name));
    } else if (step.kind === "dropout" && step.act === "prelu") {
      out.push(extractAlpha(model, step.name));
    }
  }
  return out;
}

function extractAlpha(model: tf.Sequential, layerName: string): TensorOut {
  const alpha = model.getLayer(`${layerName}_alpha`).getWeights()[0]
    .dataSync() as Float32Array;
  if (alpha.length !== 1) {
    throw new Error(`layer ${layerName}: expected one shared slope, got ${alpha.length}`);
  }
  return { name: `${layerName}.alpha`, shape: [1], data: alpha };
}
