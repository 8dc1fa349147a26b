/** Seeded SGD-with-momentum training loop over the digit archives.
 *
 * Everything that can vary is pinned: weight initializers carry per-layer
 * seeds, batch order comes from our own PRNG, and the CPU backend is pure JS,
 * so a job re-run with the same seed reproduces parameter bytes exactly.
 */
import * as tf from "@tensorflow/tfjs";

import { DigitData } from "./idx";
import { permutation } from "./prng";

export interface TrainConfig {
  epochs: number;
  batch: number;
  lr: number;
  momentum: number;
  lrStep: number;   // epochs between learning-rate adjustments
  lrDecay: number;  // multiplicative adjustment
  seed: number;
}

export interface EpochLog {
  epoch: number;
  lr: number;
  loss: number;
}

export function trainModel(
  model: tf.Sequential, train: DigitData, cfg: TrainConfig,
  onEpoch?: (log: EpochLog) => void,
): void {
  const n = train.count;
  const xs = tf.tensor4d(train.images, [n, 28, 28, 1]);
  const ys = tf.oneHot(tf.tensor1d(train.labels, "int32"), 10);
  let lr = cfg.lr;
  const optimizer = tf.train.momentum(lr, cfg.momentum);
  try {
    for (let epoch = 0; epoch < cfg.epochs; epoch++) {
      if (epoch > 0 && epoch % cfg.lrStep === 0) {
        lr *= cfg.lrDecay;
        (optimizer as unknown as { setLearningRate(v: number): void }).setLearningRate(lr);
      }
      const order = permutation(n, cfg.seed * 100003 + epoch);
      let lossSum = 0;
      let batches = 0;
      for (let start = 0; start < n; start += cfg.batch) {
        const idx = tf.tensor1d(order.subarray(start, Math.min(start + cfg.batch, n)), "int32");
        const loss = optimizer.minimize(() => {
          const x = tf.gather(xs, idx);
          const y = tf.gather(ys, idx);
          const logits = model.apply(x, { training: true }) as tf.Tensor;
          return tf.losses.softmaxCrossEntropy(y, logits) as tf.Scalar;
        }, true);
        lossSum += loss!.dataSync()[0];
        batches += 1;
        loss!.dispose();
        idx.dispose();
      }
      onEpoch?.({ epoch: epoch + 1, lr, loss: lossSum / batches });
    }
  } finally {
    xs.dispose();
    ys.dispose();
    optimizer.dispose();
  }
}

export function evaluateAccuracy(model: tf.Sequential, data: DigitData,
                                 batch = 500): number {
  let correct = 0;
  for (let start = 0; start < data.count; start += batch) {
    const size = Math.min(batch, data.count - start);
    const x = tf.tensor4d(data.images.subarray(start * 784, (start + size) * 784),
                          [size, 28, 28, 1]);
    const pred = (model.predict(x) as tf.Tensor).argMax(1);
    const labels = pred.dataSync();
    for (let i = 0; i < size; i++) {
      if (labels[i] === data.labels[start + i]) correct += 1;
    }
    x.dispose();
    pred.dispose();
  }
  return correct / data.count;
}

export function predictLogits(model: tf.Sequential, data: DigitData,
                              limit: number): Float32Array {
  const x = tf.tensor4d(data.images.subarray(0, limit * 784), [limit, 28, 28, 1]);
  const logits = model.predict(x) as tf.Tensor;
  const out = logits.dataSync() as Float32Array;
  x.dispose();
  logits.dispose();
  return out;
}
