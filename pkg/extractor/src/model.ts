/**
 * Local TensorFlow.js model loading and feature pooling.
 *
 * Models are read from a directory holding `model.json` plus the weight
 * shards it references (the standard tfjs layers/graph layout). A custom IO
 * handler stands in for the file:// scheme, which plain tfjs does not
 * provide outside the browser.
 */

import { promises as fs } from 'fs';
import * as path from 'path';
import * as tf from '@tensorflow/tfjs';

export type Pooling = 'auto' | 'none' | 'cls' | 'mean' | 'gap';

function concatBuffers(buffers: ArrayBuffer[]): ArrayBuffer {
  const total = buffers.reduce((acc, b) => acc + b.byteLength, 0);
  const out = new Uint8Array(total);
  let offset = 0;
  for (const b of buffers) {
    out.set(new Uint8Array(b), offset);
    offset += b.byteLength;
  }
  return out.buffer;
}

function diskLoadHandler(modelDir: string): tf.io.IOHandler {
  return {
    load: async () => {
      const manifestPath = path.join(modelDir, 'model.json');
      const json = JSON.parse(await fs.readFile(manifestPath, 'utf8'));
      const weightSpecs: tf.io.WeightsManifestEntry[] = [];
      const shards: ArrayBuffer[] = [];
      for (const group of json.weightsManifest ?? []) {
        weightSpecs.push(...group.weights);
        for (const rel of group.paths) {
          const buf = await fs.readFile(path.join(modelDir, rel));
          shards.push(buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength));
        }
      }
      return {
        modelTopology: json.modelTopology,
        format: json.format,
        generatedBy: json.generatedBy,
        convertedBy: json.convertedBy,
        weightSpecs,
        weightData: concatBuffers(shards),
      };
    },
  };
}

export function diskSaveHandler(modelDir: string): tf.io.IOHandler {
  return {
    save: async (artifacts: tf.io.ModelArtifacts) => {
      await fs.mkdir(modelDir, { recursive: true });
      const weightData = artifacts.weightData as ArrayBuffer | ArrayBuffer[];
      const joined = Array.isArray(weightData) ? concatBuffers(weightData) : weightData;
      await fs.writeFile(path.join(modelDir, 'weights.bin'), Buffer.from(joined));
      const json = {
        modelTopology: artifacts.modelTopology,
        format: artifacts.format,
        generatedBy: artifacts.generatedBy,
        convertedBy: artifacts.convertedBy ?? null,
        weightsManifest: [{ paths: ['weights.bin'], weights: artifacts.weightSpecs }],
      };
      await fs.writeFile(path.join(modelDir, 'model.json'), JSON.stringify(json));
      return {
        modelArtifactsInfo: {
          dateSaved: new Date(),
          modelTopologyType: 'JSON' as const,
        },
      };
    },
  };
}

export interface Backbone {
  model: tf.LayersModel | tf.GraphModel;
  inputHeight: number;
  inputWidth: number;
  featureDim: number;
  pooling: Exclude<Pooling, 'auto'>;
}

function resolvePooling(outputShape: number[], requested: Pooling): Exclude<Pooling, 'auto'> {
  if (requested !== 'auto') {
    return requested;
  }
  if (outputShape.length === 2) return 'none';
  if (outputShape.length === 3) return 'cls'; // token sequence: class token first
  if (outputShape.length === 4) return 'gap'; // conv map: global average pool
  throw new Error(`cannot infer pooling for output rank ${outputShape.length}`);
}

export function poolFeatures(
  output: tf.Tensor,
  pooling: Exclude<Pooling, 'auto'>,
): tf.Tensor2D {
  switch (pooling) {
    case 'none':
      return output as tf.Tensor2D;
    case 'cls':
      return tf.tidy(() => (output as tf.Tensor3D).slice([0, 0, 0], [-1, 1, -1]).squeeze([1]));
    case 'mean':
      return tf.tidy(() => (output as tf.Tensor3D).mean(1));
    case 'gap':
      return tf.tidy(() => (output as tf.Tensor4D).mean([1, 2]));
  }
}

export async function loadBackbone(modelDir: string, pooling: Pooling = 'auto'): Promise<Backbone> {
  const manifest = JSON.parse(await fs.readFile(path.join(modelDir, 'model.json'), 'utf8'));
  const isGraph = manifest.format === 'graph-model';
  const model = isGraph
    ? await tf.loadGraphModel(diskLoadHandler(modelDir))
    : await tf.loadLayersModel(diskLoadHandler(modelDir));

  const inputShape = model.inputs[0].shape;
  if (!inputShape || inputShape.length !== 4) {
    throw new Error(`backbone must take image batches [n,h,w,c], got ${inputShape}`);
  }
  const [, h, w] = inputShape;
  if (!h || !w || h < 1 || w < 1) {
    throw new Error(`backbone input size must be static, got ${inputShape}`);
  }

  // probe once to learn the output shape and feature width
  const probe = tf.zeros([1, h, w, 3]);
  const rawOut = model.predict(probe) as tf.Tensor;
  const resolved = resolvePooling(rawOut.shape, pooling);
  const pooled = poolFeatures(rawOut, resolved);
  const featureDim = pooled.shape[1];
  tf.dispose([probe, rawOut, pooled]);

  return { model, inputHeight: h, inputWidth: w, featureDim, pooling: resolved };
}
