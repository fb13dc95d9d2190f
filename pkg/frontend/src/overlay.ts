/** Mask overlay pixels and the 0.5-level contour polylines.
 *
 * Both functions operate on a flat grayscale byte array (row-major,
 * one byte per pixel, 255 = fully anomalous) so they stay testable
 * outside the browser.
 */

export interface Rgb {
    r: number;
    g: number;
    b: number;
}

export const OVERLAY_COLOR: Rgb = { r: 255, g: 64, b: 48 };

/** RGBA bytes tinting mask probability with the given opacity. */
export function maskToOverlay(
    gray: Uint8Array | Uint8ClampedArray, width: number, height: number,
    color: Rgb, opacity: number,
) {
    const out = new Uint8ClampedArray(width * height * 4);
    for (let i = 0; i < width * height; i++) {
        const p = gray[i] / 255;
        out[i * 4] = color.r;
        out[i * 4 + 1] = color.g;
        out[i * 4 + 2] = color.b;
        out[i * 4 + 3] = Math.round(255 * opacity * p);
    }
    return out;
}

type Segment = [number, number, number, number];

/** Marching-squares contour at a byte threshold (default 127.5 = 0.5).
 *
 * Returns polylines as flat arrays of [x0, y0, x1, y1, ...] in image
 * coordinates, with linear interpolation along cell edges.
 */
export function maskContours(
    gray: Uint8Array | Uint8ClampedArray, width: number, height: number,
    threshold = 127.5,
): number[][] {
    const value = (x: number, y: number): number => {
        if (x < 0 || y < 0 || x >= width || y >= height) return 0;
        return gray[y * width + x];
    };
    const interp = (a: number, b: number): number => {
        if (a === b) return 0.5;
        return (threshold - a) / (b - a);
    };

    const segments: Segment[] = [];
    for (let y = -1; y < height; y++) {
        for (let x = -1; x < width; x++) {
            const tl = value(x, y);
            const tr = value(x + 1, y);
            const bl = value(x, y + 1);
            const br = value(x + 1, y + 1);
            let code = 0;
            if (tl > threshold) code |= 8;
            if (tr > threshold) code |= 4;
            if (br > threshold) code |= 2;
            if (bl > threshold) code |= 1;
            if (code === 0 || code === 15) continue;

            // edge midpoints with interpolation; coordinates are pixel centers
            const cx = x + 0.5;
            const cy = y + 0.5;
            const top: [number, number] = [cx + interp(tl, tr), cy];
            const right: [number, number] = [cx + 1, cy + interp(tr, br)];
            const bottom: [number, number] = [cx + interp(bl, br), cy + 1];
            const left: [number, number] = [cx, cy + interp(tl, bl)];

            const emit = (a: [number, number], b: [number, number]) =>
                segments.push([a[0], a[1], b[0], b[1]]);
            switch (code) {
                case 1: emit(left, bottom); break;
                case 2: emit(bottom, right); break;
                case 3: emit(left, right); break;
                case 4: emit(top, right); break;
                case 5: emit(left, top); emit(bottom, right); break;
                case 6: emit(top, bottom); break;
                case 7: emit(left, top); break;
                case 8: emit(left, top); break;
                case 9: emit(top, bottom); break;
                case 10: emit(left, bottom); emit(top, right); break;
                case 11: emit(top, right); break;
                case 12: emit(left, right); break;
                case 13: emit(bottom, right); break;
                case 14: emit(left, bottom); break;
            }
        }
    }
    return chainSegments(segments);
}

function key(x: number, y: number): string {
    return `${x.toFixed(3)},${y.toFixed(3)}`;
}

/** Join loose segments into polylines, treating them as undirected. */
function chainSegments(segments: Segment[]): number[][] {
    const byEndpoint = new Map<string, Segment[]>();
    const add = (k: string, s: Segment) => {
        const bucket = byEndpoint.get(k);
        if (bucket) bucket.push(s); else byEndpoint.set(k, [s]);
    };
    for (const s of segments) {
        add(key(s[0], s[1]), s);
        add(key(s[2], s[3]), s);
    }
    const used = new Set<Segment>();
    const lines: number[][] = [];
    for (const seed of segments) {
        if (used.has(seed)) continue;
        used.add(seed);
        const line: number[] = [seed[0], seed[1], seed[2], seed[3]];
        let [endX, endY] = [seed[2], seed[3]];
        for (;;) {
            const candidates = byEndpoint.get(key(endX, endY)) ?? [];
            const next = candidates.find((s) => !used.has(s));
            if (!next) break;
            used.add(next);
            // orient the segment so it continues from the current end
            const forward = key(next[0], next[1]) === key(endX, endY);
            const [nx, ny] = forward ? [next[2], next[3]] : [next[0], next[1]];
            line.push(nx, ny);
            [endX, endY] = [nx, ny];
        }
        lines.push(line);
    }
    return lines;
}
