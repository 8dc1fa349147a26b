/** Reader for the standard gzipped IDX image/label archives in data/. */
import * as fs from "fs";
import * as zlib from "zlib";

export interface DigitData {
  images: Float32Array; // N*784, pixels scaled to [0,1]
  labels: Uint8Array;
  count: number;
}

function readGz(path: string): Buffer {
  return zlib.gunzipSync(fs.readFileSync(path));
}

export function readImages(path: string): { data: Float32Array; count: number } {
  const buf = readGz(path);
  const magic = buf.readUInt32BE(0);
  if (magic !== 0x803) throw new Error(`${path}: not an IDX image file`);
  const count = buf.readUInt32BE(4);
  const rows = buf.readUInt32BE(8);
  const cols = buf.readUInt32BE(12);
  if (rows !== 28 || cols !== 28) throw new Error(`${path}: expected 28x28 images`);
  const pixels = count * rows * cols;
  const data = new Float32Array(pixels);
  for (let i = 0; i < pixels; i++) data[i] = buf[16 + i] / 255;
  return { data, count };
}

export function readLabels(path: string): Uint8Array {
  const buf = readGz(path);
  const magic = buf.readUInt32BE(0);
  if (magic !== 0x801) throw new Error(`${path}: not an IDX label file`);
  const count = buf.readUInt32BE(4);
  return new Uint8Array(buf.subarray(8, 8 + count));
}

export function loadSplit(dir: string, split: "train" | "val"): DigitData {
  const images = readImages(`${dir}/${split}-images-idx3-ubyte.gz`);
  const labels = readLabels(`${dir}/${split}-labels-idx1-ubyte.gz`);
  if (labels.length !== images.count) throw new Error(`${split}: image/label count mismatch`);
  return { images: images.data, labels, count: images.count };
}
