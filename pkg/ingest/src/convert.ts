import { readFile, writeFile, mkdir } from 'node:fs/promises';
import { join, extname, basename } from 'node:path';
import TurndownService from 'turndown';
// @ts-expect-error the gfm plugin ships no type declarations
import { gfm } from '@joplin/turndown-plugin-gfm';
import { parse } from 'node-html-parser';

export const TOOL_VERSION = 'finkg-ingest 0.1.0';

export interface SectionEntry {
  title: string;
  char_start: number;
}

export interface IngestManifest {
  doc_id: string;
  company_ticker: string;
  source_path: string;
  markdown_path: string;
  section_index: SectionEntry[];
  produced_at: string;
  tool_version: string;
}

export class ConversionError extends Error {}

const turndownService = new TurndownService({
  headingStyle: 'atx',
  hr: '---',
  bulletListMarker: '-',
  codeBlockStyle: 'fenced',
});
turndownService.use(gfm);

/**
 * Promote the first row of header-less tables to <th> cells. The table
 * serializer needs a header row to emit the pipe separator, and a filing
 * table's first row is its header in practice.
 */
function promoteTableHeaders(html: string): string {
  const root = parse(html);
  for (const table of root.querySelectorAll('table')) {
    if (table.querySelector('th')) continue;
    const firstRow = table.querySelector('tr');
    if (!firstRow) continue;
    firstRow.replaceWith(
      firstRow.outerHTML.replace(/<td\b/gi, '<th').replace(/<\/td>/gi, '</th>'),
    );
  }
  return root.toString();
}

export function htmlToMarkdown(html: string): string {
  return turndownService.turndown(promoteTableHeaders(html));
}

async function pdfToMarkdown(buffer: Buffer): Promise<string> {
  const { PDFParse } = await import('pdf-parse');
  const parser = new PDFParse({ data: new Uint8Array(buffer) });
  try {
    const result = await parser.getText();
    return result.text ?? '';
  } finally {
    await parser.destroy();
  }
}

const HEADING_LINE = /^(#{1,6})\s+(.+?)\s*$/;
// "Item 1A. Risk Factors" style captions, optionally bolded, outside headings.
const ITEM_LINE = /^\s*(?:\*\*)?(Item\s+\d+[A-Z]?\..*?)(?:\*\*)?\s*$/i;

export function buildSectionIndex(markdown: string): SectionEntry[] {
  const sections: SectionEntry[] = [];
  let offset = 0;
  for (const line of markdown.split('\n')) {
    const heading = HEADING_LINE.exec(line);
    const item = heading ? null : ITEM_LINE.exec(line);
    if (heading) {
      sections.push({ title: heading[2], char_start: offset });
    } else if (item) {
      sections.push({ title: item[1].trim(), char_start: offset });
    }
    offset += line.length + 1;
  }
  return sections;
}

export interface ConvertOptions {
  source: string;
  docId: string;
  ticker: string;
  outDir: string;
}

export async function convertFiling(options: ConvertOptions): Promise<IngestManifest> {
  const { source, docId, ticker, outDir } = options;
  const ext = extname(source).toLowerCase();

  let raw: Buffer;
  try {
    raw = await readFile(source);
  } catch (err) {
    throw new ConversionError(`cannot read source ${source}: ${(err as Error).message}`);
  }

  let markdown: string;
  if (ext === '.html' || ext === '.htm') {
    markdown = htmlToMarkdown(raw.toString('utf8'));
  } else if (ext === '.pdf') {
    markdown = await pdfToMarkdown(raw);
  } else {
    throw new ConversionError(`unsupported format ${ext || '(none)'} for ${source}`);
  }

  markdown = markdown.replace(/\s+$/, '') + '\n';
  if (markdown.trim() === '') {
    throw new ConversionError(`empty extraction from ${source}; nothing written`);
  }

  await mkdir(outDir, { recursive: true });
  const markdownPath = join(outDir, `${docId}.md`);
  await writeFile(markdownPath, markdown, 'utf8');

  const manifest: IngestManifest = {
    doc_id: docId,
    company_ticker: ticker,
    source_path: source,
    markdown_path: markdownPath,
    section_index: buildSectionIndex(markdown),
    produced_at: new Date().toISOString(),
    tool_version: TOOL_VERSION,
  };
  const manifestPath = join(outDir, `${docId}.manifest.json`);
  await writeFile(manifestPath, JSON.stringify(manifest, null, 2) + '\n', 'utf8');
  return manifest;
}

export function manifestPathFor(outDir: string, docId: string): string {
  return join(outDir, `${basename(docId)}.manifest.json`);
}
