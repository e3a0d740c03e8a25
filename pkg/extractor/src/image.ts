/** PNG decoding into normalized float tensors. */

import { promises as fs } from 'fs';
import { PNG } from 'pngjs';
import * as tf from '@tensorflow/tfjs';

/** Decode a PNG file to a [h, w, 3] float tensor scaled to [0, 1]. */
export async function loadPatch(file: string): Promise<tf.Tensor3D> {
  const buf = await fs.readFile(file);
  const png = PNG.sync.read(buf);
  const { width, height, data } = png; // RGBA byte rows
  const rgb = new Float32Array(width * height * 3);
  for (let i = 0, j = 0; i < data.length; i += 4, j += 3) {
    rgb[j] = data[i] / 255;
    rgb[j + 1] = data[i + 1] / 255;
    rgb[j + 2] = data[i + 2] / 255;
  }
  return tf.tensor3d(rgb, [height, width, 3]);
}

/** Bilinear resize to the backbone's expected input size. */
export function resizeTo(patch: tf.Tensor3D, height: number, width: number): tf.Tensor3D {
  if (patch.shape[0] === height && patch.shape[1] === width) {
    return patch;
  }
  const resized = tf.image.resizeBilinear(patch, [height, width]);
  patch.dispose();
  return resized;
}
