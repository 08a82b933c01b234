import { describe, expect, it } from 'vitest';

import {
  cssTransform,
  IDENTITY,
  imageToScreen,
  MAX_SCALE,
  MIN_SCALE,
  pan,
  screenToImage,
  zoomAt,
  type ViewTransform,
} from '../src/zoom.js';

function randomTransform(seed: number): ViewTransform {
  // cheap deterministic pseudo-randoms, enough to sweep the plane
  const r = (n: number) => {
    const x = Math.sin(seed * 374761393 + n * 668265263) * 43758.5453;
    return x - Math.floor(x);
  };
  return { scale: 1 + r(1) * 8, x: (r(2) - 0.5) * 600, y: (r(3) - 0.5) * 600 };
}

describe('coordinate mapping', () => {
  it('round trips screen and image coordinates', () => {
    for (let seed = 0; seed < 50; seed += 1) {
      const t = randomTransform(seed);
      const image = screenToImage(t, 123.5, -42.25);
      const screen = imageToScreen(t, image.x, image.y);
      expect(screen.x).toBeCloseTo(123.5, 9);
      expect(screen.y).toBeCloseTo(-42.25, 9);
    }
  });

  it('identity maps pixels onto themselves', () => {
    expect(screenToImage(IDENTITY, 37, 91)).toEqual({ x: 37, y: 91 });
    expect(imageToScreen(IDENTITY, 37, 91)).toEqual({ x: 37, y: 91 });
  });
});

describe('zoomAt', () => {
  it('keeps the image point under the cursor fixed', () => {
    for (let seed = 0; seed < 50; seed += 1) {
      const t = randomTransform(seed);
      const cursor = { x: 200 * (seed / 50), y: 300 - seed };
      const before = screenToImage(t, cursor.x, cursor.y);
      const zoomed = zoomAt(t, cursor.x, cursor.y, 1.5);
      const after = screenToImage(zoomed, cursor.x, cursor.y);
      expect(after.x).toBeCloseTo(before.x, 9);
      expect(after.y).toBeCloseTo(before.y, 9);
    }
  });

  it('clamps the scale to the configured range', () => {
    const min = zoomAt(IDENTITY, 0, 0, 1e-9);
    const max = zoomAt({ scale: 15, x: 0, y: 0 }, 10, 10, 100);
    expect(min.scale).toBe(MIN_SCALE);
    expect(max.scale).toBe(MAX_SCALE);
  });

  it('a clamped zoom at the same cursor is a no-op', () => {
    const t = zoomAt(IDENTITY, 40, 40, 0.01);
    expect(t).toEqual(IDENTITY);
  });
});

describe('pan', () => {
  it('shifts the offset without touching the scale', () => {
    const t = pan({ scale: 3, x: 10, y: -4 }, 7, 8);
    expect(t).toEqual({ scale: 3, x: 17, y: 4 });
  });

  it('moves every screen point by the same pixel delta', () => {
    const t = randomTransform(7);
    const moved = pan(t, 12, -9);
    const before = imageToScreen(t, 55, 66);
    const after = imageToScreen(moved, 55, 66);
    expect(after.x - before.x).toBeCloseTo(12, 9);
    expect(after.y - before.y).toBeCloseTo(-9, 9);
  });
});

describe('cssTransform', () => {
  it('renders translate-then-scale', () => {
    expect(cssTransform({ scale: 2.5, x: 4, y: -8 })).toBe(
      'translate(4px, -8px) scale(2.5)',
    );
  });
});
