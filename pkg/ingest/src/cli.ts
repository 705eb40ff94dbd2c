#!/usr/bin/env node
import { convertFiling, ConversionError, manifestPathFor } from './convert.js';

const USAGE =
  'Usage: ingest --source <file.html|file.pdf> --doc-id <id> [--ticker <T>] --out <dir>';

function argValue(args: string[], flag: string): string | undefined {
  const i = args.indexOf(flag);
  return i === -1 ? undefined : args[i + 1];
}

async function main() {
  const args = process.argv.slice(2);
  const source = argValue(args, '--source');
  const docId = argValue(args, '--doc-id');
  const outDir = argValue(args, '--out');
  const ticker = argValue(args, '--ticker') ?? '';
  if (!source || !docId || !outDir) {
    console.error(USAGE);
    process.exit(2);
  }

  const manifest = await convertFiling({ source, docId, ticker, outDir });
  console.log(manifest.markdown_path);
  console.log(manifestPathFor(outDir, docId));
}

main().catch((err) => {
  if (err instanceof ConversionError) {
    console.error(err.message);
  } else {
    console.error(err instanceof Error ? err.stack : String(err));
  }
  process.exit(1);
});
