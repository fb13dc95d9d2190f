/** DOM wiring for the single-page annotation client. */

import { ApiClient, ImageInfo } from "./api.js";
import {
    ViewTransform,
    fitTransform,
    hitPixel,
    imageToCanvas,
    pixelCenterOnCanvas,
    zoomAt,
} from "./coords.js";
import { OVERLAY_COLOR, maskContours, maskToOverlay } from "./overlay.js";
import { NEGATIVE, POSITIVE, SessionController } from "./state.js";

const POSITIVE_COLOR = "#2d7ff9"; // positive clicks drawn in blue
const NEGATIVE_COLOR = "#f9c833"; // negative clicks drawn in yellow

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
}

class App {
    private api = new ApiClient("");
    private canvas = el<HTMLCanvasElement>("canvas");
    private ctx = this.canvas.getContext("2d")!;
    private imageSelect = el<HTMLSelectElement>("image-select");
    private defectSelect = el<HTMLSelectElement>("defect-select");
    private opacitySlider = el<HTMLInputElement>("opacity");
    private undoButton = el<HTMLButtonElement>("undo");
    private exportButton = el<HTMLButtonElement>("export");
    private statusLine = el<HTMLSpanElement>("status");
    private toastBox = el<HTMLDivElement>("toast");

    private images: ImageInfo[] = [];
    private bitmap: ImageBitmap | null = null;
    private imageW = 0;
    private imageH = 0;
    private maskGray: Uint8Array | null = null;
    private view: ViewTransform = { zoom: 1, panX: 0, panY: 0 };
    private toastTimer: number | undefined;

    private controller = new SessionController(
        this.api,
        () => this.render(),
        (message) => this.showToast(message),
    );

    async start(): Promise<void> {
        this.images = await this.api.listImages();
        const defects = await this.api.defectTypes();
        for (const image of this.images) {
            const option = document.createElement("option");
            option.value = image.id;
            option.textContent = `${image.id} (${image.width}x${image.height})`;
            this.imageSelect.appendChild(option);
        }
        for (const defect of defects) {
            const option = document.createElement("option");
            option.value = defect;
            option.textContent = defect;
            this.defectSelect.appendChild(option);
        }
        this.bindEvents();
        if (this.images.length && defects.length) {
            await this.openSession();
        }
    }

    private bindEvents(): void {
        this.imageSelect.addEventListener("change", () => void this.openSession());
        this.defectSelect.addEventListener("change", () => void this.openSession());
        this.opacitySlider.addEventListener("input", () => {
            this.controller.setOpacity(Number(this.opacitySlider.value) / 100);
        });
        this.undoButton.addEventListener("click", () => void this.controller.undo());
        this.exportButton.addEventListener("click", () => void this.controller.exportLabel());

        this.canvas.addEventListener("contextmenu", (e) => e.preventDefault());
        this.canvas.addEventListener("mousedown", (e) => {
            const rect = this.canvas.getBoundingClientRect();
            const cx = e.clientX - rect.left;
            const cy = e.clientY - rect.top;
            const pixel = hitPixel(this.view, cx, cy, this.imageW, this.imageH);
            if (!pixel) return;
            const polarity = e.button === 2 ? NEGATIVE : POSITIVE;
            void this.placeClick(pixel.x, pixel.y, polarity);
        });
        this.canvas.addEventListener("wheel", (e) => {
            e.preventDefault();
            const rect = this.canvas.getBoundingClientRect();
            const factor = e.deltaY < 0 ? 1.2 : 1 / 1.2;
            this.view = zoomAt(this.view, factor, e.clientX - rect.left, e.clientY - rect.top);
            this.render();
        }, { passive: false });
    }

    private async openSession(): Promise<void> {
        const imageId = this.imageSelect.value;
        const defect = this.defectSelect.value;
        if (!imageId || !defect) return;
        const info = this.images.find((i) => i.id === imageId);
        if (!info) return;
        this.imageW = info.width;
        this.imageH = info.height;
        const resp = await fetch(this.api.imagePngUrl(imageId));
        this.bitmap = await createImageBitmap(await resp.blob());
        this.view = fitTransform(this.canvas.width, this.canvas.height,
                                 this.imageW, this.imageH);
        this.maskGray = null;
        await this.controller.startSession(imageId, defect);
    }

    private async placeClick(x: number, y: number, polarity: number): Promise<void> {
        const accepted = await this.controller.placeClick(x, y, polarity);
        if (accepted) {
            await this.decodeMask();
            this.render();
        }
    }

    /** Decode the base64 mask PNG into a grayscale byte array. */
    private async decodeMask(): Promise<void> {
        const b64 = this.controller.state.maskPngBase64;
        if (!b64) {
            this.maskGray = null;
            return;
        }
        const bytes = Uint8Array.from(atob(b64), (c) => c.charCodeAt(0));
        const bitmap = await createImageBitmap(new Blob([bytes], { type: "image/png" }));
        const scratch = document.createElement("canvas");
        scratch.width = bitmap.width;
        scratch.height = bitmap.height;
        const sctx = scratch.getContext("2d")!;
        sctx.drawImage(bitmap, 0, 0);
        const data = sctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
        const gray = new Uint8Array(bitmap.width * bitmap.height);
        for (let i = 0; i < gray.length; i++) gray[i] = data[i * 4];
        this.maskGray = gray;
    }

    private render(): void {
        const state = this.controller.state;
        this.ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
        if (this.bitmap) {
            this.ctx.imageSmoothingEnabled = this.view.zoom < 1;
            this.ctx.drawImage(
                this.bitmap,
                this.view.panX, this.view.panY,
                this.imageW * this.view.zoom, this.imageH * this.view.zoom,
            );
        }
        if (this.maskGray && state.maskPngBase64) {
            this.drawOverlay(this.maskGray, state.overlayOpacity);
        }
        for (const click of state.clicks) {
            const center = pixelCenterOnCanvas(this.view, click.x, click.y);
            this.ctx.beginPath();
            this.ctx.arc(center.x, center.y, 6, 0, Math.PI * 2);
            this.ctx.fillStyle = click.polarity === POSITIVE ? POSITIVE_COLOR : NEGATIVE_COLOR;
            this.ctx.globalAlpha = click.pending ? 0.5 : 1.0;
            this.ctx.fill();
            this.ctx.globalAlpha = 1.0;
            this.ctx.lineWidth = 1.5;
            this.ctx.strokeStyle = "#111";
            this.ctx.stroke();
        }
        this.statusLine.textContent = state.sessionId
            ? `session ${state.sessionId} | clicks: ${state.clicks.length}`
              + (state.pending ? " | working..." : "")
            : "no session";
        this.undoButton.disabled = state.pending || state.clicks.length === 0;
        this.exportButton.disabled = state.pending || !state.sessionId;
    }

    private drawOverlay(gray: Uint8Array, opacity: number): void {
        const rgba = maskToOverlay(gray, this.imageW, this.imageH, OVERLAY_COLOR, opacity);
        const scratch = document.createElement("canvas");
        scratch.width = this.imageW;
        scratch.height = this.imageH;
        scratch.getContext("2d")!.putImageData(
            new ImageData(rgba, this.imageW, this.imageH), 0, 0);
        this.ctx.imageSmoothingEnabled = false;
        this.ctx.drawImage(
            scratch,
            this.view.panX, this.view.panY,
            this.imageW * this.view.zoom, this.imageH * this.view.zoom,
        );

        this.ctx.lineWidth = 1.5;
        this.ctx.strokeStyle = "#ff2018";
        for (const line of maskContours(gray, this.imageW, this.imageH)) {
            this.ctx.beginPath();
            for (let i = 0; i < line.length; i += 2) {
                const p = imageToCanvas(this.view, line[i], line[i + 1]);
                if (i === 0) this.ctx.moveTo(p.x, p.y);
                else this.ctx.lineTo(p.x, p.y);
            }
            this.ctx.stroke();
        }
    }

    private showToast(message: string): void {
        this.toastBox.textContent = message;
        this.toastBox.classList.add("visible");
        window.clearTimeout(this.toastTimer);
        this.toastTimer = window.setTimeout(
            () => this.toastBox.classList.remove("visible"), 4000);
    }
}

window.addEventListener("DOMContentLoaded", () => {
    const app = new App();
    void app.start().catch((err) => {
        document.getElementById("toast")!.textContent = String(err);
        document.getElementById("toast")!.classList.add("visible");
    });
});
