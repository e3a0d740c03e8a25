/**
 * EMB1 container writer/reader.
 *
 * Layout: magic "EMB1"; u32 LE format version (1); u64 LE row count; u64 LE
 * feature dimension; one dtype byte (0x01 = float32 LE); 7 reserved zero
 * bytes; then row-major float32 features. Per-row metadata goes to a
 * `<path>.meta.csv` sidecar, display names and the model tag to
 * `<path>.codebook.json`.
 */

import { promises as fs } from 'fs';

export const EMB1_MAGIC = 'EMB1';
export const EMB1_VERSION = 1;
export const DTYPE_F32 = 0x01;
const HEADER_BYTES = 32;

export interface RowMeta {
  patchId: string;
  slideId: string;
  patientId: string;
  site: number;
  classLabel: number | null;
  normVariant: string;
}

export interface Emb1Table {
  features: Float32Array; // row-major n x dim
  n: number;
  dim: number;
  meta: RowMeta[];
  modelTag: string;
}

const META_HEADER = 'patch_id,slide_id,patient_id,site,class,norm_variant';

function csvField(value: string): string {
  if (/[",\n]/.test(value)) {
    return '"' + value.replace(/"/g, '""') + '"';
  }
  return value;
}

export async function writeEmb1(
  path: string,
  features: Float32Array,
  dim: number,
  meta: RowMeta[],
  modelTag: string,
): Promise<void> {
  const n = meta.length;
  if (features.length !== n * dim) {
    throw new Error(`feature buffer holds ${features.length} values, expected ${n * dim}`);
  }
  const header = Buffer.alloc(HEADER_BYTES);
  header.write(EMB1_MAGIC, 0, 'ascii');
  header.writeUInt32LE(EMB1_VERSION, 4);
  header.writeBigUInt64LE(BigInt(n), 8);
  header.writeBigUInt64LE(BigInt(dim), 16);
  header.writeUInt8(DTYPE_F32, 24);
  const body = Buffer.from(features.buffer, features.byteOffset, features.byteLength);
  await fs.writeFile(path, Buffer.concat([header, body]));

  const lines = [META_HEADER];
  for (const row of meta) {
    lines.push(
      [
        csvField(row.patchId),
        csvField(row.slideId),
        csvField(row.patientId),
        String(row.site),
        row.classLabel === null ? '' : String(row.classLabel),
        csvField(row.normVariant),
      ].join(','),
    );
  }
  await fs.writeFile(`${path}.meta.csv`, lines.join('\n') + '\n');

  const codebook = { model_tag: modelTag, site_names: [], class_names: [] };
  await fs.writeFile(`${path}.codebook.json`, JSON.stringify(codebook, null, 2) + '\n');
}

/** Minimal reader, used by the tests to validate what was written. */
export async function readEmb1(path: string): Promise<Emb1Table> {
  const raw = await fs.readFile(path);
  if (raw.length < HEADER_BYTES) {
    throw new Error(`${path}: truncated header`);
  }
  if (raw.toString('ascii', 0, 4) !== EMB1_MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const version = raw.readUInt32LE(4);
  if (version !== EMB1_VERSION) {
    throw new Error(`${path}: unsupported version ${version}`);
  }
  const n = Number(raw.readBigUInt64LE(8));
  const dim = Number(raw.readBigUInt64LE(16));
  if (raw.readUInt8(24) !== DTYPE_F32) {
    throw new Error(`${path}: unsupported dtype`);
  }
  if (raw.length !== HEADER_BYTES + n * dim * 4) {
    throw new Error(`${path}: size mismatch for n=${n} dim=${dim}`);
  }
  const features = new Float32Array(n * dim);
  for (let i = 0; i < n * dim; i++) {
    features[i] = raw.readFloatLE(HEADER_BYTES + i * 4);
  }

  const metaText = await fs.readFile(`${path}.meta.csv`, 'utf8');
  const lines = metaText.split('\n').filter((l) => l.length > 0);
  if (lines[0] !== META_HEADER) {
    throw new Error('unexpected metadata header');
  }
  const meta: RowMeta[] = lines.slice(1).map((line) => {
    const parts = line.split(',');
    return {
      patchId: parts[0],
      slideId: parts[1],
      patientId: parts[2],
      site: Number(parts[3]),
      classLabel: parts[4] === '' ? null : Number(parts[4]),
      normVariant: parts[5],
    };
  });
  if (meta.length !== n) {
    throw new Error(`metadata rows (${meta.length}) do not match matrix rows (${n})`);
  }

  let modelTag = '';
  try {
    const codebook = JSON.parse(await fs.readFile(`${path}.codebook.json`, 'utf8'));
    modelTag = codebook.model_tag ?? '';
  } catch {
    // codebook sidecar is optional
  }
  return { features, n, dim, meta, modelTag };
}
