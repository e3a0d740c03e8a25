/** Command line: extract features from a patch folder or pipeline manifest. */

import { parseArgs } from 'node:util';

import { extract } from './extract.js';
import type { Pooling } from './model.js';

const HELP = `usage: extract --model <dir> --input <patches> --out <file.emb> [options]

  --model <dir>      directory with model.json + weight shards (tfjs layout)
  --input <path>     manifest.csv, a folder containing one, or a folder of PNGs
  --out <file>       output EMB1 path (sidecars written next to it)
  --batch-size <n>   inference batch size (default 16)
  --variant <v>      manifest variant to embed: raw | reinhard | macenko (default raw)
  --pooling <p>      auto | none | cls | mean | gap (default auto)
  --model-name <s>   tag recorded in the output (default: model directory name)
  --backend <b>      tfjs backend (default: runtime choice; node offers cpu)
`;

async function main(): Promise<number> {
  const { values } = parseArgs({
    options: {
      model: { type: 'string' },
      input: { type: 'string' },
      out: { type: 'string' },
      'batch-size': { type: 'string' },
      variant: { type: 'string' },
      pooling: { type: 'string' },
      'model-name': { type: 'string' },
      backend: { type: 'string' },
      help: { type: 'boolean' },
    },
  });
  if (values.help || !values.model || !values.input || !values.out) {
    process.stderr.write(HELP);
    return values.help ? 0 : 2;
  }
  const result = await extract({
    modelDir: values.model,
    input: values.input,
    outPath: values.out,
    batchSize: values['batch-size'] ? Number(values['batch-size']) : undefined,
    variant: values.variant,
    pooling: values.pooling as Pooling | undefined,
    modelName: values['model-name'],
    backend: values.backend,
  });
  console.log(
    `wrote ${result.outPath}: ${result.n} rows x ${result.dim} features` +
      (result.skipped.length ? ` (${result.skipped.length} skipped)` : ''),
  );
  return 0;
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(`extract: ${err instanceof Error ? err.message : err}`);
    process.exit(1);
  },
);
