/**
 * Batched feature extraction: patches in manifest order through a local
 * backbone, features out as an EMB1 table with metadata sidecar.
 */

import { promises as fs } from 'fs';
import * as tf from '@tensorflow/tfjs';

import { RowMeta, writeEmb1 } from './emb1.js';
import { loadPatch, resizeTo } from './image.js';
import { PatchEntry, resolveEntries } from './manifest.js';
import { loadBackbone, poolFeatures, Pooling } from './model.js';

export interface ExtractSpec {
  modelDir: string;
  input: string; // manifest CSV, folder with manifest.csv, or folder of PNGs
  outPath: string;
  batchSize?: number;
  variant?: string; // which normalization variant to read from a manifest
  pooling?: Pooling;
  modelName?: string; // tag override; defaults to the model directory name
  backend?: string; // tfjs backend selector; node offers 'cpu'
}

export interface ExtractResult {
  outPath: string;
  n: number;
  dim: number;
  skipped: { patchId: string; reason: string }[];
  modelTag: string;
}

export async function extract(spec: ExtractSpec): Promise<ExtractResult> {
  const batchSize = spec.batchSize ?? 16;
  if (batchSize < 1) {
    throw new Error('batch size must be positive');
  }
  if (spec.backend) {
    const ok = await tf.setBackend(spec.backend);
    if (!ok) {
      throw new Error(`backend ${spec.backend} is not available`);
    }
    await tf.ready();
  }
  const backbone = await loadBackbone(spec.modelDir, spec.pooling ?? 'auto');
  const entries = await resolveEntries(spec.input, spec.variant ?? 'raw');
  if (entries.length === 0) {
    throw new Error(`no patches found under ${spec.input}`);
  }

  const name = spec.modelName ?? spec.modelDir.replace(/\/+$/, '').split('/').pop();
  const modelTag =
    `${name}#dim=${backbone.featureDim}` +
    `;pool=${backbone.pooling};resize=bilinear-${backbone.inputHeight}x${backbone.inputWidth}`;

  const rows: Float32Array[] = [];
  const meta: RowMeta[] = [];
  const skipped: { patchId: string; reason: string }[] = [];

  for (let start = 0; start < entries.length; start += batchSize) {
    const batchEntries = entries.slice(start, start + batchSize);
    const tensors: tf.Tensor3D[] = [];
    const kept: PatchEntry[] = [];
    for (const entry of batchEntries) {
      try {
        const patch = await loadPatch(entry.file);
        tensors.push(resizeTo(patch, backbone.inputHeight, backbone.inputWidth));
        kept.push(entry);
      } catch (err) {
        const reason = err instanceof Error ? err.message : String(err);
        console.error(`skipping ${entry.patchId}: ${reason}`);
        skipped.push({ patchId: entry.patchId, reason });
      }
    }
    if (kept.length === 0) {
      continue;
    }
    const batch = tf.stack(tensors) as tf.Tensor4D;
    tf.dispose(tensors);
    const rawOut = backbone.model.predict(batch) as tf.Tensor;
    const pooled = poolFeatures(rawOut, backbone.pooling);
    const values = (await pooled.data()) as Float32Array;
    tf.dispose([batch, rawOut, pooled]);
    for (let i = 0; i < kept.length; i++) {
      rows.push(values.slice(i * backbone.featureDim, (i + 1) * backbone.featureDim));
      const entry = kept[i];
      meta.push({
        patchId: entry.patchId,
        slideId: entry.slideId,
        patientId: entry.patientId,
        site: entry.site,
        classLabel: entry.classLabel,
        normVariant: entry.normVariant,
      });
    }
  }

  if (rows.length === 0) {
    throw new Error('every patch failed to load');
  }
  const features = new Float32Array(rows.length * backbone.featureDim);
  rows.forEach((row, i) => features.set(row, i * backbone.featureDim));
  await writeEmb1(spec.outPath, features, backbone.featureDim, meta, modelTag);

  if (skipped.length > 0) {
    const lines = ['patch_id,reason'];
    for (const s of skipped) {
      lines.push(`${s.patchId},${s.reason.replace(/[,\n]/g, ' ')}`);
    }
    await fs.writeFile(`${spec.outPath}.skipped.csv`, lines.join('\n') + '\n');
  }

  return {
    outPath: spec.outPath,
    n: rows.length,
    dim: backbone.featureDim,
    skipped,
    modelTag,
  };
}
