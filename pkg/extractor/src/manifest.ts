/**
 * Input enumeration: either a patch-pipeline manifest CSV (columns
 * patch_id,slide_id,x,y,variant,kept,reason) or a plain folder of PNGs.
 */

import { promises as fs } from 'fs';
import * as path from 'path';

export interface PatchEntry {
  patchId: string;
  slideId: string;
  patientId: string;
  site: number;
  classLabel: number | null;
  normVariant: string;
  file: string;
}

function parseCsvLine(line: string): string[] {
  // the pipeline never quotes fields it generates, but be safe
  const out: string[] = [];
  let field = '';
  let quoted = false;
  for (let i = 0; i < line.length; i++) {
    const ch = line[i];
    if (quoted) {
      if (ch === '"' && line[i + 1] === '"') {
        field += '"';
        i++;
      } else if (ch === '"') {
        quoted = false;
      } else {
        field += ch;
      }
    } else if (ch === '"') {
      quoted = true;
    } else if (ch === ',') {
      out.push(field);
      field = '';
    } else {
      field += ch;
    }
  }
  out.push(field);
  return out;
}

export async function entriesFromManifest(
  manifestPath: string,
  variant: string,
): Promise<PatchEntry[]> {
  const text = await fs.readFile(manifestPath, 'utf8');
  const lines = text.split('\n').filter((l) => l.length > 0);
  const header = lines[0];
  if (header !== 'patch_id,slide_id,x,y,variant,kept,reason') {
    throw new Error(`unexpected manifest header: ${header}`);
  }
  const patchesDir = path.join(path.dirname(manifestPath), 'patches');
  const entries: PatchEntry[] = [];
  for (const line of lines.slice(1)) {
    const [patchId, slideId, , , rowVariant, kept] = parseCsvLine(line);
    if (kept !== 'True' || rowVariant !== variant) {
      continue;
    }
    entries.push({
      patchId,
      slideId,
      patientId: slideId, // patch pipeline has no patient table; slide stands in
      site: 0,
      classLabel: null,
      normVariant: rowVariant,
      file: path.join(patchesDir, `${patchId}__${rowVariant}.png`),
    });
  }
  return entries;
}

export async function entriesFromFolder(dir: string): Promise<PatchEntry[]> {
  const names = (await fs.readdir(dir)).filter((n) => n.toLowerCase().endsWith('.png')).sort();
  return names.map((name) => {
    const stem = name.replace(/\.png$/i, '');
    return {
      patchId: stem,
      slideId: stem,
      patientId: stem,
      site: 0,
      classLabel: null,
      normVariant: 'raw',
      file: path.join(dir, name),
    };
  });
}

/** Resolve a manifest CSV, a folder containing one, or a plain PNG folder. */
export async function resolveEntries(input: string, variant: string): Promise<PatchEntry[]> {
  const stat = await fs.stat(input);
  if (stat.isFile()) {
    return entriesFromManifest(input, variant);
  }
  const manifest = path.join(input, 'manifest.csv');
  try {
    await fs.access(manifest);
    return entriesFromManifest(manifest, variant);
  } catch {
    return entriesFromFolder(input);
  }
}
