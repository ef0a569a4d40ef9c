import Papa from "papaparse";

export type FigureKind = "distance_surface" | "sup_decay" | "mixing" | "nlw_average";

/** Column layout of each table the simulation CLI writes. */
export const SCHEMAS: Record<FigureKind, string[]> = {
  distance_surface: ["eps", "tau", "distance", "stderr"],
  sup_decay: ["eps", "sup_distance", "stderr"],
  mixing: ["tau", "ghat", "floor"],
  nlw_average: ["gamma", "horizon", "deviation"],
};

export class SchemaError extends Error {}

export interface Table {
  columns: string[];
  rows: number[][];
}

/** Parse CSV text against the declared schema for `kind`; any deviation
 * (header mismatch, ragged row, non-numeric cell, no data) throws. */
export function parseTable(text: string, kind: FigureKind): Table {
  const expected = SCHEMAS[kind];
  const parsed = Papa.parse<string[]>(text.trim(), { skipEmptyLines: true });
  if (parsed.errors.length > 0) {
    throw new SchemaError(`CSV parse error: ${parsed.errors[0].message}`);
  }
  const grid = parsed.data;
  if (grid.length === 0) {
    throw new SchemaError("empty file");
  }
  const header = grid[0].map((h) => h.trim());
  if (header.length !== expected.length || expected.some((c, i) => header[i] !== c)) {
    throw new SchemaError(
      `expected columns "${expected.join(",")}" but found "${header.join(",")}"`,
    );
  }
  const rows: number[][] = [];
  for (let i = 1; i < grid.length; i++) {
    const cells = grid[i];
    if (cells.length !== expected.length) {
      throw new SchemaError(
        `row ${i + 1}: expected ${expected.length} fields, found ${cells.length}`,
      );
    }
    rows.push(
      cells.map((cell, j) => {
        const v = Number(cell);
        if (cell.trim() === "" || !Number.isFinite(v)) {
          throw new SchemaError(
            `row ${i + 1}, column ${expected[j]}: not a finite number: ${JSON.stringify(cell)}`,
          );
        }
        return v;
      }),
    );
  }
  if (rows.length === 0) {
    throw new SchemaError("table has a header but no data rows");
  }
  return { columns: expected, rows };
}

export function column(table: Table, name: string): number[] {
  const j = table.columns.indexOf(name);
  if (j < 0) throw new SchemaError(`no column ${name}`);
  return table.rows.map((r) => r[j]);
}

/** Split rows into series keyed by the value in `name`, first-seen order. */
export function groupBy(table: Table, name: string): Map<number, number[][]> {
  const j = table.columns.indexOf(name);
  if (j < 0) throw new SchemaError(`no column ${name}`);
  const out = new Map<number, number[][]>();
  for (const row of table.rows) {
    const key = row[j];
    const bucket = out.get(key);
    if (bucket) bucket.push(row);
    else out.set(key, [row]);
  }
  return out;
}
