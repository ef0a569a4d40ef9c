#!/usr/bin/env node
import { readFileSync, writeFileSync } from "node:fs";
import { parseArgs } from "node:util";

import { FigureKind, SCHEMAS, SchemaError } from "./csv.js";
import { FigureOptions, renderFigure } from "./figures.js";
import { RenderError, Scale } from "./svg.js";

const USAGE = `usage: plots <kind> --in <csv> --out <svg> [--x-scale linear|log] [--y-scale linear|log]

kinds: ${Object.keys(SCHEMAS).join(", ")}`;

function fail(message: string): never {
  process.stderr.write(`plots: ${message}\n${USAGE}\n`);
  process.exit(2);
}

function asScale(raw: string | undefined, flag: string): Scale | undefined {
  if (raw === undefined) return undefined;
  if (raw === "linear" || raw === "log") return raw;
  return fail(`${flag} must be "linear" or "log", got "${raw}"`);
}

export function main(argv: string[]): void {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      allowPositionals: true,
      options: {
        in: { type: "string" },
        out: { type: "string" },
        "x-scale": { type: "string" },
        "y-scale": { type: "string" },
      },
    });
  } catch (err) {
    return fail((err as Error).message);
  }
  const { values, positionals } = parsed;
  if (positionals.length !== 1) {
    return fail(`expected exactly one figure kind, got ${positionals.length}`);
  }
  const kind = positionals[0];
  if (!(kind in SCHEMAS)) {
    return fail(`unknown figure kind "${kind}"`);
  }
  if (!values.in || !values.out) {
    return fail("--in and --out are required");
  }
  let csvText: string;
  try {
    csvText = readFileSync(values.in, "utf8");
  } catch (err) {
    process.stderr.write(`plots: cannot read ${values.in}: ${(err as Error).message}\n`);
    process.exit(2);
  }
  const options: FigureOptions = {
    xScale: asScale(values["x-scale"], "--x-scale"),
    yScale: asScale(values["y-scale"], "--y-scale"),
  };
  let svg: string;
  try {
    svg = renderFigure(kind as FigureKind, csvText, options);
  } catch (err) {
    if (err instanceof SchemaError || err instanceof RenderError) {
      process.stderr.write(`plots: ${err.message}\n`);
      process.exit(2);
    }
    throw err;
  }
  writeFileSync(values.out, svg);
  process.stderr.write(`wrote ${values.out}\n`);
}

main(process.argv.slice(2));
