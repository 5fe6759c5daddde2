// Stroke model and deterministic rasterization into the service's indexed
// scribble mask (0 = untouched, 1 = foreground, 2 = background).
//
// Strokes are stamped as filled circles along each polyline segment with
// last-write-wins per pixel, so the same stroke list always produces the
// same mask bytes regardless of browser, device or replay timing.

export type BrushKind = "fg" | "bg" | "erase";

export interface StrokePoint {
  x: number; // column, image pixels
  y: number; // row, image pixels
}

export interface Stroke {
  kind: BrushKind;
  radius: number;
  points: StrokePoint[];
}

export const FG = 1;
export const BG = 2;
export const NONE = 0;

const LABELS: Record<BrushKind, number> = { fg: FG, bg: BG, erase: NONE };

function stampCircle(mask: Uint8Array, width: number, height: number,
                     cx: number, cy: number, radius: number, label: number): void {
  const r = Math.max(0, radius);
  const r2 = r * r;
  const x0 = Math.max(0, Math.ceil(cx - r));
  const x1 = Math.min(width - 1, Math.floor(cx + r));
  const y0 = Math.max(0, Math.ceil(cy - r));
  const y1 = Math.min(height - 1, Math.floor(cy + r));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) {
        mask[y * width + x] = label;
      }
    }
  }
}

/** Rasterize strokes in order into a fresh width x height indexed mask. */
export function rasterize(strokes: Stroke[], width: number, height: number): Uint8Array {
  const mask = new Uint8Array(width * height);
  for (const stroke of strokes) {
    const label = LABELS[stroke.kind];
    const pts = stroke.points;
    if (pts.length === 0) continue;
    stampCircle(mask, width, height, pts[0].x, pts[0].y, stroke.radius, label);
    for (let i = 1; i < pts.length; i++) {
      const a = pts[i - 1];
      const b = pts[i];
      const dist = Math.hypot(b.x - a.x, b.y - a.y);
      const steps = Math.max(1, Math.ceil(dist / Math.max(stroke.radius / 2, 0.5)));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        stampCircle(mask, width, height, a.x + t * (b.x - a.x),
                    a.y + t * (b.y - a.y), stroke.radius, label);
      }
    }
  }
  return mask;
}

export interface ScribblePayload {
  view_id: number;
  fg: number[][];
  bg: number[][];
}

/** Row-major (row, col) coordinate lists, the service's scribble format. */
export function maskToScribble(mask: Uint8Array, width: number, height: number,
                               viewId: number): ScribblePayload {
  const fg: number[][] = [];
  const bg: number[][] = [];
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const v = mask[y * width + x];
      if (v === FG) fg.push([y, x]);
      else if (v === BG) bg.push([y, x]);
    }
  }
  return { view_id: viewId, fg, bg };
}

export function countLabel(mask: Uint8Array, label: number): number {
  let n = 0;
  for (let i = 0; i < mask.length; i++) {
    if (mask[i] === label) n++;
  }
  return n;
}
