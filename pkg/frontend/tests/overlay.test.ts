import { describe, expect, it } from "vitest";

import { maskContours, maskToOverlay } from "../src/overlay.js";

describe("mask overlay", () => {
    it("scales alpha with probability and opacity", () => {
        const gray = new Uint8Array([0, 128, 255, 64]);
        const rgba = maskToOverlay(gray, 2, 2, { r: 10, g: 20, b: 30 }, 0.5);
        expect(rgba[3]).toBe(0);
        expect(rgba[7]).toBe(Math.round(255 * 0.5 * (128 / 255)));
        expect(rgba[11]).toBe(Math.round(255 * 0.5));
        expect([rgba[0], rgba[1], rgba[2]]).toEqual([10, 20, 30]);
    });
});

describe("mask contours", () => {
    it("empty and full masks have no contour", () => {
        expect(maskContours(new Uint8Array(16).fill(0), 4, 4)).toEqual([]);
        // a full mask still has a boundary against the padded outside
        const full = maskContours(new Uint8Array(16).fill(255), 4, 4);
        expect(full.length).toBeGreaterThan(0);
    });

    it("a solid square produces a closed loop around it", () => {
        const gray = new Uint8Array(36);
        for (let y = 2; y < 4; y++) {
            for (let x = 2; x < 4; x++) gray[y * 6 + x] = 255;
        }
        const lines = maskContours(gray, 6, 6);
        expect(lines.length).toBe(1);
        const line = lines[0];
        // closed: last point equals first point
        expect(line[0]).toBeCloseTo(line[line.length - 2], 6);
        expect(line[1]).toBeCloseTo(line[line.length - 1], 6);
        // every contour point lies within half a pixel of the square border
        for (let i = 0; i < line.length; i += 2) {
            const x = line[i];
            const y = line[i + 1];
            expect(x).toBeGreaterThanOrEqual(1.4);
            expect(x).toBeLessThanOrEqual(4.6);
            expect(y).toBeGreaterThanOrEqual(1.4);
            expect(y).toBeLessThanOrEqual(4.6);
        }
    });

    it("two separate blobs produce two loops", () => {
        const gray = new Uint8Array(64);
        gray[1 * 8 + 1] = 255;
        gray[6 * 8 + 6] = 255;
        const lines = maskContours(gray, 8, 8);
        expect(lines.length).toBe(2);
    });
});
