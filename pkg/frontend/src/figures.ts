import { createHash } from "node:crypto";

import { FigureKind, Table, column, groupBy, parseTable } from "./csv.js";
import {
  Axis, HEIGHT, MARGIN, PALETTE, Scale, SceneText, WIDTH,
  clampToAxis, makeAxis, polyline, project, px, scene,
} from "./svg.js";

export interface FigureOptions {
  xScale?: Scale;
  yScale?: Scale;
}

interface Series {
  label: string;
  x: number[];
  y: number[];
  band?: number[];
  bars?: number[];
  dashed?: boolean;
}

interface Layout {
  title: string;
  xLabel: string;
  yLabel: string;
  xScale: Scale;
  yScale: Scale;
  series: Series[];
  markers: boolean;
}

const PX0 = MARGIN.left;
const PX1 = WIDTH - MARGIN.right;
const PY0 = HEIGHT - MARGIN.bottom;
const PY1 = MARGIN.top;

function numLabel(v: number): string {
  return String(v);
}

function distanceSurface(table: Table): Layout {
  const series: Series[] = [];
  for (const [eps, rows] of groupBy(table, "eps")) {
    series.push({
      label: `eps = ${numLabel(eps)}`,
      x: rows.map((r) => r[1]),
      y: rows.map((r) => r[2]),
      band: rows.map((r) => 2 * r[3]),
    });
  }
  return {
    title: "action-law distance between perturbed and effective ensembles",
    xLabel: "tau",
    yLabel: "capped transport distance",
    xScale: "linear",
    yScale: "linear",
    series,
    markers: false,
  };
}

function supDecay(table: Table): Layout {
  const order = column(table, "eps").map((v, i) => [v, i]).sort((a, b) => a[0] - b[0]);
  const rows = order.map(([, i]) => table.rows[i]);
  return {
    title: "sup over tau of the action-law distance",
    xLabel: "eps",
    yLabel: "sup distance",
    xScale: "log",
    yScale: "log",
    series: [{
      label: "sup distance",
      x: rows.map((r) => r[0]),
      y: rows.map((r) => r[1]),
      bars: rows.map((r) => 2 * r[2]),
    }],
    markers: true,
  };
}

function mixing(table: Table): Layout {
  const tau = column(table, "tau");
  return {
    title: "distance to the stationary pool along one trajectory bundle",
    xLabel: "tau",
    yLabel: "capped transport distance",
    xScale: "linear",
    yScale: "linear",
    series: [
      { label: "ghat", x: tau, y: column(table, "ghat") },
      { label: "sampling floor", x: tau, y: column(table, "floor"), dashed: true },
    ],
    markers: false,
  };
}

function nlwAverage(table: Table): Layout {
  const series: Series[] = [];
  for (const [gamma, rows] of groupBy(table, "gamma")) {
    series.push({
      label: `gamma = ${numLabel(gamma)}`,
      x: rows.map((r) => r[1]),
      y: rows.map((r) => r[2]),
    });
  }
  return {
    title: "deviation of time-averaged actions from the invariant law",
    xLabel: "horizon",
    yLabel: "max deviation",
    xScale: "log",
    yScale: "log",
    series,
    markers: true,
  };
}

const BUILDERS: Record<FigureKind, (table: Table) => Layout> = {
  distance_surface: distanceSurface,
  sup_decay: supDecay,
  mixing: mixing,
  nlw_average: nlwAverage,
};

function axisValues(layout: Layout, scale: Scale, pick: (s: Series) => number[],
                    spread: (s: Series) => number[] | undefined): number[] {
  const vals: number[] = [];
  for (const s of layout.series) {
    const ys = pick(s);
    const widths = spread(s);
    ys.forEach((v, i) => {
      vals.push(v);
      if (widths) {
        vals.push(v + widths[i]);
        // the lower edge is clamped to the axis under a log scale
        if (scale !== "log") vals.push(v - widths[i]);
      }
    });
  }
  return vals;
}

function seriesBody(layout: Layout, x: Axis, y: Axis): string {
  const out: string[] = [];
  layout.series.forEach((s, i) => {
    const color = PALETTE[i % PALETTE.length];
    const xs = s.x.map((v) => project(x, v));
    const ys = s.y.map((v) => project(y, v));
    if (s.band) {
      const upper = s.y.map((v, k) => project(y, clampToAxis(y, v + s.band![k])));
      const lower = s.y.map((v, k) => project(y, clampToAxis(y, v - s.band![k])));
      const fwd = xs.map((v, k) => `${px(v)},${px(upper[k])}`);
      const rev = xs.map((v, k) => `${px(v)},${px(lower[k])}`).reverse();
      out.push(`<path d="M${fwd.join(" L")} L${rev.join(" L")} Z" fill="${color}" fill-opacity="0.15" stroke="none"/>`);
    }
    if (s.bars) {
      s.x.forEach((v, k) => {
        const cx = px(project(x, v));
        const top = px(project(y, clampToAxis(y, s.y[k] + s.bars![k])));
        const bot = px(project(y, clampToAxis(y, s.y[k] - s.bars![k])));
        out.push(`<line x1="${cx}" y1="${top}" x2="${cx}" y2="${bot}" stroke="${color}"/>`);
        out.push(`<line x1="${px(project(x, v) - 4)}" y1="${top}" x2="${px(project(x, v) + 4)}" y2="${top}" stroke="${color}"/>`);
        out.push(`<line x1="${px(project(x, v) - 4)}" y1="${bot}" x2="${px(project(x, v) + 4)}" y2="${bot}" stroke="${color}"/>`);
      });
    }
    const dash = s.dashed ? ' stroke-dasharray="6 4"' : "";
    out.push(`<path d="${polyline(xs, ys)}" fill="none" stroke="${color}" stroke-width="2"${dash}/>`);
    if (layout.markers) {
      xs.forEach((v, k) => {
        out.push(`<circle cx="${px(v)}" cy="${px(ys[k])}" r="3.5" fill="${color}"/>`);
      });
    }
  });
  return out.join("\n");
}

/**
 * Render one figure kind from raw CSV text.
 *
 * The output depends only on the bytes of the input and the options, so a
 * repeated call reproduces the file exactly.  The first twelve hex digits of
 * the input's sha256 land in the footer for provenance.
 */
export function renderFigure(kind: FigureKind, csvText: string,
                             options: FigureOptions = {}): string {
  const table = parseTable(csvText, kind);
  const layout = BUILDERS[kind](table);
  const xScale = options.xScale ?? layout.xScale;
  const yScale = options.yScale ?? layout.yScale;
  const x = makeAxis(xScale, axisValues(layout, xScale, (s) => s.x, () => undefined),
                     PX0, PX1, "x");
  const y = makeAxis(yScale, axisValues(layout, yScale, (s) => s.y, (s) => s.band ?? s.bars),
                     PY0, PY1, "y");
  const body = seriesBody({ ...layout, xScale, yScale }, x, y);
  const hash = createHash("sha256").update(csvText).digest("hex").slice(0, 12);
  const text: SceneText = {
    title: layout.title,
    xLabel: layout.xLabel,
    yLabel: layout.yLabel,
    footerLeft: `resavg-plots ${kind}`,
    footerRight: `input sha256 ${hash}`,
  };
  return scene(x, y, body, layout.series.map((s) => s.label),
               layout.series.map((_, i) => PALETTE[i % PALETTE.length]),
               layout.series.map((s) => Boolean(s.dashed)), text);
}
