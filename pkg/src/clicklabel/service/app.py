"""FastAPI application exposing the interactive labeling loop."""

from __future__ import annotations

import os
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from clicklabel.clicks import Click
from clicklabel.errors import EmptyHistoryError, WorkspaceError
from clicklabel.service.schemas import (
    ClickOut,
    ClickRequest,
    CreateSessionRequest,
    CreateSessionResponse,
    ExportResponse,
    ImageInfo,
    MaskResponse,
    SessionState,
)
from clicklabel.service.state import ServiceState, mask_to_png_base64

WORKSPACE_ENV = "CLICKLABEL_WORKSPACE"


def create_app(workspace_root: str | os.PathLike | None = None) -> FastAPI:
    """Build the service around one workspace.

    The workspace may also come from the CLICKLABEL_WORKSPACE
    environment variable; an explicit argument wins.
    """
    root = workspace_root or os.environ.get(WORKSPACE_ENV)
    if not root:
        raise WorkspaceError(
            f"no workspace: pass --workspace or set {WORKSPACE_ENV}"
        )
    state = ServiceState(root)
    app = FastAPI(title="clicklabel annotation service")
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def _not_found(what: str) -> JSONResponse:
        return JSONResponse(status_code=404, content={"detail": what})

    @app.get("/api/images", response_model=list[ImageInfo])
    def list_images():
        return state.image_ids()

    @app.get("/api/images/{image_id}/png")
    def image_png(image_id: str):
        try:
            data = state.image_png_bytes(image_id)
        except WorkspaceError:
            return _not_found(f"unknown image {image_id!r}")
        return Response(content=data, media_type="image/png")

    @app.get("/api/defect-types", response_model=list[str])
    def defect_types():
        return sorted(state.prompt_features)

    @app.post("/api/sessions", response_model=CreateSessionResponse)
    def create_session(body: CreateSessionRequest):
        if body.image_id not in state.workspace.manifest["images"]:
            return _not_found(f"unknown image {body.image_id!r}")
        if body.defect_type not in state.prompt_features:
            return _not_found(f"unknown defect type {body.defect_type!r}")
        runtime = state.create_session(body.image_id, body.defect_type)
        sid = runtime.log_path.stem
        return CreateSessionResponse(session_id=sid)

    @app.post("/api/sessions/{session_id}/clicks", response_model=MaskResponse)
    def add_click(session_id: str, body: ClickRequest):
        runtime = state.get(session_id)
        if runtime is None:
            return _not_found(f"unknown session {session_id!r}")
        ctx = runtime.ctx
        if body.polarity not in (0, 1) or not (
            0 <= body.x < ctx.width and 0 <= body.y < ctx.height
        ):
            return JSONResponse(
                status_code=422,
                content={"detail": f"click ({body.x}, {body.y}, polarity="
                                   f"{body.polarity}) outside image bounds"},
            )
        with runtime.lock:
            mask = state.click(runtime, Click(x=body.x, y=body.y,
                                              polarity=body.polarity))
            t = runtime.session.t
        return MaskResponse(mask_png_base64=mask_to_png_base64(mask), t=t)

    @app.post("/api/sessions/{session_id}/undo", response_model=MaskResponse)
    def undo_click(session_id: str):
        runtime = state.get(session_id)
        if runtime is None:
            return _not_found(f"unknown session {session_id!r}")
        with runtime.lock:
            try:
                mask = state.undo(runtime)
            except EmptyHistoryError:
                return JSONResponse(status_code=409,
                                    content={"detail": "nothing to undo"})
            t = runtime.session.t
        return MaskResponse(mask_png_base64=mask_to_png_base64(mask), t=t)

    @app.post("/api/sessions/{session_id}/export", response_model=ExportResponse)
    def export_session(session_id: str):
        runtime = state.get(session_id)
        if runtime is None:
            return _not_found(f"unknown session {session_id!r}")
        with runtime.lock:
            rel = state.export(session_id, runtime)
        return ExportResponse(label_path=rel)

    @app.get("/api/sessions/{session_id}", response_model=SessionState)
    def session_state(session_id: str):
        runtime = state.get(session_id)
        if runtime is None:
            return _not_found(f"unknown session {session_id!r}")
        with runtime.lock:
            s = runtime.session
            return SessionState(
                session_id=session_id,
                image_id=s.image_id,
                defect_type=s.defect_type,
                model_id=s.model_id,
                t=s.t,
                clicks=[ClickOut(t=c.t, x=c.x, y=c.y, polarity=c.polarity)
                        for c in s.clicks],
                mask_png_base64=mask_to_png_base64(s.current_mask),
            )

    ui_dir = os.environ.get("CLICKLABEL_UI_DIR")
    static_dir = Path(ui_dir) if ui_dir else (
        Path(__file__).resolve().parents[3] / "frontend" / "dist"
    )
    if static_dir.is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
