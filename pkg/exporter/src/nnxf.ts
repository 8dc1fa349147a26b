/** Binary writers for the NNXF model / NNXD dataset exchange formats.
 *
 * Layouts are little-endian and documented bit-exactly in docs/format.md at
 * the repository root. The architecture JSON must be canonical (recursively
 * sorted keys, compact separators, ASCII) so that save(load(file)) on the
 * analysis side is byte-identical. Float-valued hyper-parameters travel as
 * raw IEEE754 bit patterns (integers), never as decimal text.
 */

export type Activation =
  | "none" | "relu" | "prelu" | "relu6" | "reluclamp" | "tanh" | "softmax";

export interface LayerJson {
  name: string;
  kind: "conv" | "fc" | "maxpool" | "batchnorm" | "dropout" | "flatten";
  activation: Activation;
  [extra: string]: unknown;
}

export interface ArchJson {
  class_count: number;
  input_shape: number[];
  layers: LayerJson[];
}

export interface TensorOut {
  name: string;
  shape: number[];
  data: Float32Array;
}

export function floatBits(value: number): number {
  const buf = new DataView(new ArrayBuffer(4));
  buf.setFloat32(0, value, true);
  return buf.getUint32(0, true);
}

function sortValue(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortValue);
  if (value !== null && typeof value === "object") {
    const src = value as Record<string, unknown>;
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(src).sort()) out[key] = sortValue(src[key]);
    return out;
  }
  return value;
}

export function canonicalJson(obj: unknown): Buffer {
  return Buffer.from(JSON.stringify(sortValue(obj)), "ascii");
}

export function encodeModel(arch: ArchJson, tensors: TensorOut[]): Buffer {
  const archBytes = canonicalJson(arch);
  const parts: Buffer[] = [];
  const head = Buffer.alloc(12);
  head.write("NNXF", 0, "ascii");
  head.writeUInt32LE(1, 4);
  head.writeUInt32LE(archBytes.length, 8);
  parts.push(head, archBytes);
  const count = Buffer.alloc(4);
  count.writeUInt32LE(tensors.length, 0);
  parts.push(count);
  for (const t of tensors) {
    const name = Buffer.from(t.name, "utf8");
    const meta = Buffer.alloc(2 + name.length + 2 + 4 * t.shape.length);
    meta.writeUInt16LE(name.length, 0);
    name.copy(meta, 2);
    let pos = 2 + name.length;
    meta.writeUInt8(0, pos); // dtype tag 0: float32
    meta.writeUInt8(t.shape.length, pos + 1);
    pos += 2;
    for (const dim of t.shape) {
      meta.writeUInt32LE(dim, pos);
      pos += 4;
    }
    const expected = t.shape.reduce((a, b) => a * b, 1);
    if (expected !== t.data.length) {
      throw new Error(`tensor ${t.name}: payload ${t.data.length} != shape product ${expected}`);
    }
    parts.push(meta, Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength));
  }
  return Buffer.concat(parts);
}

export function encodeDataset(
  images: Float32Array, labels: ArrayLike<number>, classCount: number,
  sampleShape: number[],
): Buffer {
  const perSample = sampleShape.reduce((a, b) => a * b, 1);
  const count = labels.length;
  if (images.length !== count * perSample) {
    throw new Error(`dataset payload ${images.length} != ${count} x ${perSample}`);
  }
  const head = Buffer.alloc(4 + 4 + 4 + 2 + 1 + 4 * sampleShape.length);
  head.write("NNXD", 0, "ascii");
  head.writeUInt32LE(1, 4);
  head.writeUInt32LE(count, 8);
  head.writeUInt16LE(classCount, 12);
  head.writeUInt8(sampleShape.length, 14);
  sampleShape.forEach((dim, i) => head.writeUInt32LE(dim, 15 + 4 * i));
  const body = Buffer.alloc(count * (2 + 4 * perSample));
  let pos = 0;
  for (let i = 0; i < count; i++) {
    body.writeUInt16LE(labels[i], pos);
    pos += 2;
    for (let j = 0; j < perSample; j++) {
      body.writeFloatLE(images[i * perSample + j], pos);
      pos += 4;
    }
  }
  return Buffer.concat([head, body]);
}
