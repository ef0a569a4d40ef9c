export type Scale = "linear" | "log";

export const WIDTH = 720;
export const HEIGHT = 480;
export const MARGIN = { left: 68, right: 18, top: 30, bottom: 58 };
export const FONT = "Helvetica, Arial, sans-serif";
export const PALETTE = ["#2a6f97", "#d1495b", "#3a7d44", "#8d5a97", "#c77d1e", "#5c5c5c"];

export interface Tick {
  value: number;
  label: string;
}

export interface Axis {
  scale: Scale;
  lo: number;
  hi: number;
  px0: number;
  px1: number;
  ticks: Tick[];
}

export class RenderError extends Error {}

/** Fixed two-decimal pixel coordinates keep the output byte-stable. */
export function px(v: number): string {
  return v.toFixed(2);
}

function stepLabel(value: number, step: number): string {
  const digits = Math.max(0, -Math.floor(Math.log10(step) + 1e-9));
  return value.toFixed(Math.min(digits, 10));
}

/** 1-2-5 ladder ticks covering [lo, hi]. */
export function linearTicks(lo: number, hi: number, target = 6): Tick[] {
  const span = hi - lo;
  const raw = span / Math.max(target, 1);
  const e = Math.floor(Math.log10(raw));
  const base = raw / 10 ** e;
  const m = base < 1.5 ? 1 : base < 3.5 ? 2 : base < 7.5 ? 5 : 10;
  const step = m * 10 ** e;
  const ticks: Tick[] = [];
  for (let k = Math.ceil(lo / step - 1e-9); k * step <= hi + 1e-9 * span; k++) {
    const label = stepLabel(k * step, step);
    ticks.push({ value: Number(label), label });
  }
  return ticks;
}

function decadeLabel(k: number): string {
  if (k >= -4 && k <= 6) {
    return k >= 0 ? String(10 ** k) : (10 ** k).toFixed(-k);
  }
  return `1e${k}`;
}

/** Decade ticks (1, 2, 5 mantissas when fewer than two decades fit). */
export function logTicks(lo: number, hi: number): Tick[] {
  const k0 = Math.ceil(Math.log10(lo) - 1e-9);
  const k1 = Math.floor(Math.log10(hi) + 1e-9);
  const ticks: Tick[] = [];
  for (let k = k0; k <= k1; k++) {
    ticks.push({ value: 10 ** k, label: decadeLabel(k) });
  }
  if (ticks.length >= 2) return ticks;
  const fine: Tick[] = [];
  for (let k = k0 - 1; k <= k1 + 1; k++) {
    for (const m of [1, 2, 5]) {
      const v = m * 10 ** k;
      if (v >= lo * (1 - 1e-12) && v <= hi * (1 + 1e-12)) {
        fine.push({ value: v, label: m === 1 ? decadeLabel(k) : stepLabel(v, 10 ** k) });
      }
    }
  }
  // sub-decade range: fall back to the linear ladder, placed by log projection
  return fine.length >= 3 ? fine : linearTicks(lo, hi, 5).filter((t) => t.value > 0);
}

export function makeAxis(scale: Scale, values: number[], px0: number, px1: number,
                         name: string): Axis {
  let lo = Math.min(...values);
  let hi = Math.max(...values);
  if (scale === "log") {
    if (lo <= 0) {
      throw new RenderError(
        `log scale for ${name} needs positive values (minimum is ${lo}); use a linear scale`,
      );
    }
    lo /= 1.15;
    hi *= 1.15;
    return { scale, lo, hi, px0, px1, ticks: logTicks(lo, hi) };
  }
  if (lo === hi) {
    const pad = Math.abs(lo) > 0 ? Math.abs(lo) * 0.1 : 1;
    lo -= pad;
    hi += pad;
  } else {
    const pad = (hi - lo) * 0.05;
    lo -= pad;
    hi += pad;
  }
  return { scale, lo, hi, px0, px1, ticks: linearTicks(lo, hi) };
}

export function project(axis: Axis, v: number): number {
  const t = axis.scale === "log"
    ? (Math.log10(v) - Math.log10(axis.lo)) / (Math.log10(axis.hi) - Math.log10(axis.lo))
    : (v - axis.lo) / (axis.hi - axis.lo);
  return axis.px0 + t * (axis.px1 - axis.px0);
}

export function clampToAxis(axis: Axis, v: number): number {
  return Math.min(axis.hi, Math.max(axis.lo, v));
}

export function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function polyline(xs: number[], ys: number[]): string {
  const parts = xs.map((x, i) => `${px(x)},${px(ys[i])}`);
  return `M${parts.join(" L")}`;
}

export interface SceneText {
  title: string;
  xLabel: string;
  yLabel: string;
  footerLeft: string;
  footerRight: string;
}

/** Assemble the fixed-size document: axes, grid, body markup, legend, footer. */
export function scene(x: Axis, y: Axis, body: string, legend: string[], colors: string[],
                      dashed: boolean[], text: SceneText): string {
  const out: string[] = [];
  out.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${WIDTH}" height="${HEIGHT}" ` +
    `viewBox="0 0 ${WIDTH} ${HEIGHT}" font-family="${FONT}">`,
  );
  out.push(`<rect width="${WIDTH}" height="${HEIGHT}" fill="#ffffff"/>`);
  for (const t of x.ticks) {
    const gx = px(project(x, t.value));
    out.push(`<line x1="${gx}" y1="${MARGIN.top}" x2="${gx}" y2="${y.px0}" stroke="#e4e4e4"/>`);
    out.push(`<text x="${gx}" y="${y.px0 + 18}" font-size="11" fill="#333" text-anchor="middle">${esc(t.label)}</text>`);
  }
  for (const t of y.ticks) {
    const gy = px(project(y, t.value));
    out.push(`<line x1="${x.px0}" y1="${gy}" x2="${x.px1}" y2="${gy}" stroke="#e4e4e4"/>`);
    out.push(`<text x="${x.px0 - 7}" y="${gy}" font-size="11" fill="#333" text-anchor="end" dominant-baseline="middle">${esc(t.label)}</text>`);
  }
  out.push(`<rect x="${x.px0}" y="${MARGIN.top}" width="${x.px1 - x.px0}" height="${y.px0 - MARGIN.top}" fill="none" stroke="#444"/>`);
  out.push(body);
  out.push(`<text x="${(x.px0 + x.px1) / 2}" y="18" font-size="14" fill="#111" text-anchor="middle">${esc(text.title)}</text>`);
  out.push(`<text x="${(x.px0 + x.px1) / 2}" y="${HEIGHT - 22}" font-size="12" fill="#111" text-anchor="middle">${esc(text.xLabel)}</text>`);
  out.push(`<text x="16" y="${(MARGIN.top + y.px0) / 2}" font-size="12" fill="#111" text-anchor="middle" transform="rotate(-90 16 ${(MARGIN.top + y.px0) / 2})">${esc(text.yLabel)}</text>`);
  legend.forEach((label, i) => {
    const ly = MARGIN.top + 16 + 16 * i;
    const lx = x.px1 - 150;
    const dash = dashed[i] ? ' stroke-dasharray="6 4"' : "";
    out.push(`<line x1="${lx}" y1="${ly - 4}" x2="${lx + 26}" y2="${ly - 4}" stroke="${colors[i]}" stroke-width="2"${dash}/>`);
    out.push(`<text x="${lx + 32}" y="${ly}" font-size="11" fill="#333">${esc(label)}</text>`);
  });
  out.push(`<text x="${x.px0}" y="${HEIGHT - 6}" font-size="9" fill="#888">${esc(text.footerLeft)}</text>`);
  out.push(`<text x="${x.px1}" y="${HEIGHT - 6}" font-size="9" fill="#888" text-anchor="end">${esc(text.footerRight)}</text>`);
  out.push("</svg>");
  return out.join("\n") + "\n";
}
