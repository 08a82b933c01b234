// Synchronized zoom/pan math. One ViewTransform is shared by every tile in
// the grid, so applying it is what keeps the views pixel-identical; the
// functions here are pure and tested with pixel-coordinate assertions.

export interface ViewTransform {
  scale: number;
  x: number;
  y: number;
}

export const MIN_SCALE = 1;
export const MAX_SCALE = 16;

export const IDENTITY: ViewTransform = { scale: 1, x: 0, y: 0 };

function clampScale(scale: number): number {
  return Math.min(MAX_SCALE, Math.max(MIN_SCALE, scale));
}

/** screen = image * scale + offset */
export function imageToScreen(t: ViewTransform, ix: number, iy: number) {
  return { x: ix * t.scale + t.x, y: iy * t.scale + t.y };
}

export function screenToImage(t: ViewTransform, sx: number, sy: number) {
  return { x: (sx - t.x) / t.scale, y: (sy - t.y) / t.scale };
}

/**
 * Scale by `factor` keeping the image point under the cursor fixed on
 * screen. Clamped to [MIN_SCALE, MAX_SCALE].
 */
export function zoomAt(
  t: ViewTransform,
  cursorX: number,
  cursorY: number,
  factor: number,
): ViewTransform {
  const scale = clampScale(t.scale * factor);
  const applied = scale / t.scale;
  return {
    scale,
    x: cursorX - (cursorX - t.x) * applied,
    y: cursorY - (cursorY - t.y) * applied,
  };
}

export function pan(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { scale: t.scale, x: t.x + dx, y: t.y + dy };
}

/** CSS transform string; every tile viewport gets this exact value. */
export function cssTransform(t: ViewTransform): string {
  return `translate(${t.x}px, ${t.y}px) scale(${t.scale})`;
}
