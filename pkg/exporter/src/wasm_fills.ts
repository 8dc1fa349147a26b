/** JS fallback kernels for gradient ops the wasm backend does not ship.
 *
 * The wasm backend is inference-oriented; training these nets needs the conv
 * filter gradient and the max-pool gradient. Plain typed-array loops are fast
 * enough here (the forward ops stay on wasm/XNNPACK).
 */
import * as tf from "@tensorflow/tfjs";

type KernelFunc = (params: { inputs: Record<string, tf.TensorInfo>;
                             attrs?: Record<string, unknown>;
                             backend: unknown }) => tf.TensorInfo;

interface WasmBackendLike {
  readSync(dataId: unknown): Float32Array;
  makeOutput(shape: number[], dtype: string): tf.TensorInfo;
  typedArrayFromHeap(t: tf.TensorInfo): Float32Array;
}

function output(backend: WasmBackendLike, shape: number[],
                fill: (out: Float32Array) => void): tf.TensorInfo {
  const info = backend.makeOutput(shape, "float32");
  const out = backend.typedArrayFromHeap(info);
  out.fill(0);
  fill(out);
  return info;
}

const conv2DBackpropFilter: KernelFunc = ({ inputs, attrs, backend }) => {
  const be = backend as WasmBackendLike;
  const x = inputs.x;
  const dy = inputs.dy;
  const { strides, pad, filterShape, dimRoundingMode } = attrs as {
    strides: number | [number, number]; pad: "same" | "valid" | number;
    filterShape: [number, number, number, number]; dimRoundingMode?: "floor" | "round" | "ceil";
  };
  const info = tf.backend_util.computeConv2DInfo(
    x.shape as [number, number, number, number], filterShape,
    strides, 1 /* dilations */, pad, dimRoundingMode, false, "channelsLast");
  const xv = be.readSync(x.dataId);
  const dyv = be.readSync(dy.dataId);
  const { batchSize, inHeight, inWidth, inChannels, outHeight, outWidth,
          outChannels, strideHeight, strideWidth, filterHeight, filterWidth } = info;
  const padTop = info.padInfo.top;
  const padLeft = info.padInfo.left;
  return output(be, filterShape, (dw) => {
    for (let n = 0; n < batchSize; n++) {
      for (let oy = 0; oy < outHeight; oy++) {
        for (let ox = 0; ox < outWidth; ox++) {
          const dyBase = ((n * outHeight + oy) * outWidth + ox) * outChannels;
          for (let ky = 0; ky < filterHeight; ky++) {
            const iy = oy * strideHeight + ky - padTop;
            if (iy < 0 || iy >= inHeight) continue;
            for (let kx = 0; kx < filterWidth; kx++) {
              const ix = ox * strideWidth + kx - padLeft;
              if (ix < 0 || ix >= inWidth) continue;
              const xBase = ((n * inHeight + iy) * inWidth + ix) * inChannels;
              const wBase = (ky * filterWidth + kx) * inChannels * outChannels;
              for (let ci = 0; ci < inChannels; ci++) {
                const xv_ = xv[xBase + ci];
                const row = wBase + ci * outChannels;
                for (let co = 0; co < outChannels; co++) {
                  dw[row + co] += xv_ * dyv[dyBase + co];
                }
              }
            }
          }
        }
      }
    }
  });
};

const maxPoolGrad: KernelFunc = ({ inputs, attrs, backend }) => {
  const be = backend as WasmBackendLike;
  const dy = inputs.dy;
  const input = inputs.input;
  const { filterSize, strides, pad, dimRoundingMode } = attrs as {
    filterSize: number | [number, number]; strides: number | [number, number];
    pad: "same" | "valid" | number; dimRoundingMode?: "floor" | "round" | "ceil";
  };
  const info = tf.backend_util.computePool2DInfo(
    input.shape as [number, number, number, number], filterSize, strides,
    1, pad, dimRoundingMode, "channelsLast");
  const xv = be.readSync(input.dataId);
  const dyv = be.readSync(dy.dataId);
  const { batchSize, inHeight, inWidth, inChannels, outHeight, outWidth,
          strideHeight, strideWidth, filterHeight, filterWidth } = info;
  const padTop = info.padInfo.top;
  const padLeft = info.padInfo.left;
  return output(be, input.shape as number[], (dx) => {
    for (let n = 0; n < batchSize; n++) {
      for (let c = 0; c < inChannels; c++) {
        for (let oy = 0; oy < outHeight; oy++) {
          for (let ox = 0; ox < outWidth; ox++) {
            // Route the gradient to the first maximum in the window, matching
            // the forward pass's tie behaviour closely enough for training.
            let best = -Infinity;
            let bestIdx = -1;
            for (let ky = 0; ky < filterHeight; ky++) {
              const iy = oy * strideHeight + ky - padTop;
              if (iy < 0 || iy >= inHeight) continue;
              for (let kx = 0; kx < filterWidth; kx++) {
                const ix = ox * strideWidth + kx - padLeft;
                if (ix < 0 || ix >= inWidth) continue;
                const idx = ((n * inHeight + iy) * inWidth + ix) * inChannels + c;
                if (xv[idx] > best) {
                  best = xv[idx];
                  bestIdx = idx;
                }
              }
            }
            if (bestIdx >= 0) {
              dx[bestIdx] += dyv[((n * outHeight + oy) * outWidth + ox) * inChannels + c];
            }
          }
        }
      }
    }
  });
};

export function registerWasmTrainingKernels(): void {
  const fills: Array<[string, KernelFunc]> = [
    ["Conv2DBackpropFilter", conv2DBackpropFilter],
    ["MaxPoolGrad", maxPoolGrad],
  ];
  for (const [kernelName, kernelFunc] of fills) {
    if (tf.getKernel(kernelName, "wasm") == null) {
      tf.registerKernel({ kernelName, backendName: "wasm",
                          kernelFunc: kernelFunc as never });
    }
  }
}
