/** Session state management for the annotation client.
 *
 * Exactly one click/undo/export request may be in flight per session;
 * clicks are rendered optimistically and rolled back on failure. After
 * any completed operation the local state mirrors the server's.
 */

import { ApiClient, ApiError, SessionClick } from "./api.js";

export const POSITIVE = 1;
export const NEGATIVE = 0;

export interface UiClick {
    t: number;
    x: number;
    y: number;
    polarity: number;
    pending: boolean;
}

export interface UiSessionState {
    sessionId: string | null;
    imageId: string | null;
    defectType: string | null;
    clicks: UiClick[];
    maskPngBase64: string | null;
    overlayOpacity: number;
    pending: boolean;
}

export type StateListener = (state: UiSessionState) => void;
export type ToastFn = (message: string) => void;

export class SessionController {
    readonly state: UiSessionState = {
        sessionId: null,
        imageId: null,
        defectType: null,
        clicks: [],
        maskPngBase64: null,
        overlayOpacity: 0.45,
        pending: false,
    };

    constructor(
        private api: ApiClient,
        private onChange: StateListener = () => {},
        private toast: ToastFn = () => {},
    ) {}

    private emit(): void {
        this.onChange(this.state);
    }

    /** Start a session for an image/defect pair; resets local state. */
    async startSession(imageId: string, defectType: string): Promise<void> {
        this.state.sessionId = await this.api.createSession(imageId, defectType);
        this.state.imageId = imageId;
        this.state.defectType = defectType;
        this.state.clicks = [];
        this.state.maskPngBase64 = null;
        this.state.pending = false;
        this.emit();
    }

    setOpacity(value: number): void {
        this.state.overlayOpacity = Math.min(Math.max(value, 0), 1);
        this.emit();
    }

    /** Place one click. Ignored (returns false) while a request is pending. */
    async placeClick(x: number, y: number, polarity: number): Promise<boolean> {
        if (this.state.pending || !this.state.sessionId) {
            this.toast("wait for the previous action to finish");
            return false;
        }
        this.state.pending = true;
        const optimistic: UiClick = {
            t: this.state.clicks.length + 1, x, y, polarity, pending: true,
        };
        this.state.clicks.push(optimistic);
        this.emit();
        try {
            const resp = await this.api.addClick(this.state.sessionId, { x, y, polarity });
            optimistic.pending = false;
            optimistic.t = resp.t;
            this.state.maskPngBase64 = resp.mask_png_base64;
            return true;
        } catch (err) {
            this.state.clicks.pop(); // roll the marker back
            this.toast(err instanceof ApiError ? err.detail : String(err));
            return false;
        } finally {
            this.state.pending = false;
            this.emit();
        }
    }

    async undo(): Promise<boolean> {
        if (this.state.pending || !this.state.sessionId) {
            this.toast("wait for the previous action to finish");
            return false;
        }
        if (this.state.clicks.length === 0) {
            this.toast("nothing to undo");
            return false;
        }
        this.state.pending = true;
        this.emit();
        try {
            const resp = await this.api.undo(this.state.sessionId);
            this.state.clicks.pop();
            this.state.maskPngBase64 = resp.mask_png_base64;
            return true;
        } catch (err) {
            this.toast(err instanceof ApiError ? err.detail : String(err));
            return false;
        } finally {
            this.state.pending = false;
            this.emit();
        }
    }

    async exportLabel(): Promise<string | null> {
        if (this.state.pending || !this.state.sessionId) {
            this.toast("wait for the previous action to finish");
            return null;
        }
        this.state.pending = true;
        this.emit();
        try {
            const resp = await this.api.exportLabel(this.state.sessionId);
            this.toast(`label written to ${resp.label_path}`);
            return resp.label_path;
        } catch (err) {
            this.toast(err instanceof ApiError ? err.detail : String(err));
            return null;
        } finally {
            this.state.pending = false;
            this.emit();
        }
    }

    /** Field-for-field comparison against the server's session state. */
    matchesServer(server: {
        session_id: string; image_id: string; defect_type: string; t: number;
        clicks: SessionClick[];
    }): boolean {
        if (server.session_id !== this.state.sessionId) return false;
        if (server.image_id !== this.state.imageId) return false;
        if (server.defect_type !== this.state.defectType) return false;
        if (server.t !== this.state.clicks.length) return false;
        return server.clicks.every((c, i) => {
            const local = this.state.clicks[i];
            return local !== undefined && c.t === local.t && c.x === local.x
                && c.y === local.y && c.polarity === local.polarity;
        });
    }
}
