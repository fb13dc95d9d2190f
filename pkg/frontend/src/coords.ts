/** Canvas-to-image coordinate mapping under zoom and pan.
 *
 * The image is drawn at scale `zoom` with its top-left corner at
 * (panX, panY) in canvas pixels. Canvas point (cx, cy) therefore shows
 * image point ((cx - panX) / zoom, (cy - panY) / zoom). The mapping
 * uses pixel-corner coordinates: image pixel (ix, iy) covers the square
 * [ix, ix+1) x [iy, iy+1), whose center maps to canvas
 * (panX + (ix + 0.5) * zoom, ...).
 */

export interface ViewTransform {
    zoom: number;
    panX: number;
    panY: number;
}

export interface PixelHit {
    x: number;
    y: number;
}

export function canvasToImage(t: ViewTransform, cx: number, cy: number): { x: number; y: number } {
    return { x: (cx - t.panX) / t.zoom, y: (cy - t.panY) / t.zoom };
}

export function imageToCanvas(t: ViewTransform, ix: number, iy: number): { x: number; y: number } {
    return { x: t.panX + ix * t.zoom, y: t.panY + iy * t.zoom };
}

/** Canvas position of the center of an integer image pixel. */
export function pixelCenterOnCanvas(t: ViewTransform, px: number, py: number): { x: number; y: number } {
    return imageToCanvas(t, px + 0.5, py + 0.5);
}

/** The integer image pixel under a canvas point, or null when outside. */
export function hitPixel(
    t: ViewTransform, cx: number, cy: number, width: number, height: number,
): PixelHit | null {
    const p = canvasToImage(t, cx, cy);
    const x = Math.floor(p.x);
    const y = Math.floor(p.y);
    if (x < 0 || y < 0 || x >= width || y >= height) {
        return null;
    }
    return { x, y };
}

/** Fit-to-view transform with integer-friendly centering. */
export function fitTransform(
    canvasW: number, canvasH: number, imageW: number, imageH: number,
): ViewTransform {
    const zoom = Math.min(canvasW / imageW, canvasH / imageH);
    return {
        zoom,
        panX: (canvasW - imageW * zoom) / 2,
        panY: (canvasH - imageH * zoom) / 2,
    };
}

/** Zoom about a canvas anchor point, keeping that point fixed. */
export function zoomAt(t: ViewTransform, factor: number, cx: number, cy: number): ViewTransform {
    const zoom = Math.min(Math.max(t.zoom * factor, 0.1), 64);
    const image = canvasToImage(t, cx, cy);
    return {
        zoom,
        panX: cx - image.x * zoom,
        panY: cy - image.y * zoom,
    };
}
