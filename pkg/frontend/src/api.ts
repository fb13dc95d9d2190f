/** Typed client for the annotation session API. */

export interface ImageInfo {
    id: string;
    width: number;
    height: number;
}

export interface ClickPayload {
    x: number;
    y: number;
    polarity: number;
}

export interface MaskResponse {
    mask_png_base64: string;
    t: number;
}

export interface SessionClick {
    t: number;
    x: number;
    y: number;
    polarity: number;
}

export interface SessionStateResponse {
    session_id: string;
    image_id: string;
    defect_type: string;
    model_id: string;
    t: number;
    clicks: SessionClick[];
    mask_png_base64: string;
}

export class ApiError extends Error {
    constructor(public status: number, public detail: string) {
        super(`HTTP ${status}: ${detail}`);
    }
}

type FetchLike = typeof fetch;

export class ApiClient {
    constructor(private baseUrl: string = "", private fetchImpl: FetchLike = fetch) {}

    private async request<T>(path: string, init?: RequestInit): Promise<T> {
        const resp = await this.fetchImpl(this.baseUrl + path, init);
        if (!resp.ok) {
            let detail = resp.statusText;
            try {
                const body = await resp.json();
                detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail);
            } catch {
                // non-JSON error body; keep the status text
            }
            throw new ApiError(resp.status, detail);
        }
        return (await resp.json()) as T;
    }

    listImages(): Promise<ImageInfo[]> {
        return this.request<ImageInfo[]>("/api/images");
    }

    defectTypes(): Promise<string[]> {
        return this.request<string[]>("/api/defect-types");
    }

    imagePngUrl(imageId: string): string {
        return `${this.baseUrl}/api/images/${encodeURIComponent(imageId)}/png`;
    }

    async createSession(imageId: string, defectType: string): Promise<string> {
        const body = JSON.stringify({ image_id: imageId, defect_type: defectType });
        const resp = await this.request<{ session_id: string }>("/api/sessions", {
            method: "POST",
            headers: { "content-type": "application/json" },
            body,
        });
        return resp.session_id;
    }

    addClick(sessionId: string, click: ClickPayload): Promise<MaskResponse> {
        return this.request<MaskResponse>(`/api/sessions/${sessionId}/clicks`, {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify(click),
        });
    }

    undo(sessionId: string): Promise<MaskResponse> {
        return this.request<MaskResponse>(`/api/sessions/${sessionId}/undo`, {
            method: "POST",
        });
    }

    exportLabel(sessionId: string): Promise<{ label_path: string }> {
        return this.request<{ label_path: string }>(`/api/sessions/${sessionId}/export`, {
            method: "POST",
        });
    }

    sessionState(sessionId: string): Promise<SessionStateResponse> {
        return this.request<SessionStateResponse>(`/api/sessions/${sessionId}`);
    }
}
