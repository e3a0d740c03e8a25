/** Deterministic fixtures: a tiny seeded backbone and seeded PNG patches. */

import { promises as fs } from 'fs';
import * as path from 'path';
import * as tf from '@tensorflow/tfjs';
import { PNG } from 'pngjs';

import { diskSaveHandler } from '../src/model.js';

/** mulberry32: small deterministic PRNG so fixtures never drift. */
export function prng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function seedWeights(model: tf.LayersModel, seed: number): void {
  const rand = prng(seed);
  const seeded = model.getWeights().map((w) => {
    const values = new Float32Array(w.size);
    for (let i = 0; i < values.length; i++) {
      values[i] = (rand() - 0.5) * 0.6;
    }
    return tf.tensor(values, w.shape);
  });
  model.setWeights(seeded);
}

/** Conv backbone with an internal pooled head: output shape [n, featureDim]. */
export async function savePooledBackbone(
  dir: string,
  featureDim = 24,
  inputSize = 32,
  seed = 7,
): Promise<void> {
  const model = tf.sequential({
    layers: [
      tf.layers.conv2d({
        inputShape: [inputSize, inputSize, 3],
        filters: 8,
        kernelSize: 3,
        activation: 'relu',
      }),
      tf.layers.maxPooling2d({ poolSize: 2 }),
      tf.layers.conv2d({ filters: 16, kernelSize: 3, activation: 'relu' }),
      tf.layers.globalAveragePooling2d({}),
      tf.layers.dense({ units: featureDim }),
    ],
  });
  seedWeights(model, seed);
  await model.save(diskSaveHandler(dir));
  model.dispose();
}

/** Conv backbone without a head: output is a [n, h, w, c] feature map. */
export async function saveConvMapBackbone(dir: string, seed = 11): Promise<void> {
  const model = tf.sequential({
    layers: [
      tf.layers.conv2d({
        inputShape: [16, 16, 3],
        filters: 12,
        kernelSize: 3,
        activation: 'relu',
      }),
    ],
  });
  seedWeights(model, seed);
  await model.save(diskSaveHandler(dir));
  model.dispose();
}

export async function writeRandomPatch(
  file: string,
  size: number,
  seed: number,
): Promise<void> {
  const rand = prng(seed);
  const png = new PNG({ width: size, height: size });
  for (let i = 0; i < png.data.length; i += 4) {
    png.data[i] = Math.floor(rand() * 256);
    png.data[i + 1] = Math.floor(rand() * 256);
    png.data[i + 2] = Math.floor(rand() * 256);
    png.data[i + 3] = 255;
  }
  await fs.writeFile(file, PNG.sync.write(png));
}

export async function makePatchFolder(
  dir: string,
  count = 10,
  size = 32,
): Promise<string[]> {
  await fs.mkdir(dir, { recursive: true });
  const ids: string[] = [];
  for (let i = 0; i < count; i++) {
    const id = `patch${String(i).padStart(2, '0')}`;
    await writeRandomPatch(path.join(dir, `${id}.png`), size, 1000 + i);
    ids.push(id);
  }
  return ids;
}
