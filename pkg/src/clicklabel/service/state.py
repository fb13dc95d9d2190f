"""Service-side runtime: loaded assets, live sessions, persistent logs.

Model, bank, and prompt features are immutable after startup and shared
read-only. Each session owns a lock, so operations on one session are
serialized while different sessions proceed concurrently. Every
mutating call appends to the session's JSONL event log; replaying the
logs after a restart reconstructs identical masks.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from clicklabel.clicks import Click
from clicklabel.errors import WorkspaceError
from clicklabel.features import extract_features
from clicklabel.images import load_png, resize_image, save_png
from clicklabel.pipeline import PipelineConfig
from clicklabel.prompts import average_prompt_feature, embed_prompt, load_prompt_file
from clicklabel.refiner import load_params
from clicklabel.residual import load_bank, match_residual
from clicklabel.session import (
    ClickSession,
    RefineContext,
    export_mask,
    new_session,
    refine,
    undo,
)
from clicklabel.workspace import Workspace


def mask_to_png_base64(mask: np.ndarray) -> str:
    """Probability map to base64 8-bit grayscale PNG."""
    gray = np.round(np.clip(mask, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class SessionRuntime:
    session: ClickSession
    ctx: RefineContext
    log_path: Path
    lock: threading.Lock = field(default_factory=threading.Lock)

    def append_event(self, event: dict) -> None:
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event) + "\n")


class ServiceState:
    """Everything the endpoints need, loaded once from a workspace."""

    def __init__(self, workspace_root: str | Path) -> None:
        self.workspace = Workspace(workspace_root)
        manifest = self.workspace.manifest
        if not manifest.get("model") or not manifest.get("bank"):
            raise WorkspaceError("workspace manifest lacks a model or bank")
        self.pipeline = PipelineConfig.from_dict({
            "image_size": manifest.get("image_size", 512),
            "backend": manifest.get("backend"),
            "match": manifest.get("match"),
            "embedder": manifest.get("embedder"),
            "r_click": manifest.get("r_click"),
        })
        self.params = load_params(self.workspace.path(manifest["model"]))
        self.model_id = Path(manifest["model"]).stem
        self.bank = load_bank(self.workspace.path(manifest["bank"]))
        self.prompt_features = {}
        for defect, entry in manifest["prompts"].items():
            prompts = load_prompt_file(self.workspace.path(entry["file"]))
            feats = [embed_prompt(p, self.pipeline.embedder) for p in prompts]
            self.prompt_features[defect] = average_prompt_feature(feats)
        self._residual_cache: dict[str, object] = {}
        self._cache_lock = threading.Lock()
        self.sessions: dict[str, SessionRuntime] = {}
        self._sessions_lock = threading.Lock()
        self.restore_sessions()

    # --- assets ---------------------------------------------------------

    def image_ids(self) -> list[dict]:
        out = []
        for image_id, entry in sorted(self.workspace.manifest["images"].items()):
            out.append({"id": image_id, "width": entry["width"],
                        "height": entry["height"]})
        return out

    def image_png_bytes(self, image_id: str) -> bytes:
        entry = self.workspace.image_entry(image_id)
        return self.workspace.path(entry["path"]).read_bytes()

    def residual_for(self, image_id: str):
        with self._cache_lock:
            cached = self._residual_cache.get(image_id)
        if cached is not None:
            return cached
        entry = self.workspace.image_entry(image_id)
        image = resize_image(load_png(self.workspace.path(entry["path"])),
                             self.pipeline.image_size, self.pipeline.image_size)
        tensor = extract_features(image, self.pipeline.backend, source_id=image_id)
        residual = match_residual(self.bank, tensor, self.pipeline.match)
        with self._cache_lock:
            self._residual_cache[image_id] = residual
        return residual

    def context_for(self, image_id: str, defect_type: str) -> RefineContext:
        size = self.pipeline.image_size
        r_click = self.pipeline.r_click or max(1, round(5 * size / 512))
        return RefineContext(
            params=self.params,
            residual=self.residual_for(image_id),
            prompt_feature=self.prompt_features[defect_type],
            height=size,
            width=size,
            r_click=r_click,
            model_id=self.model_id,
        )

    # --- sessions --------------------------------------------------------

    def create_session(self, image_id: str, defect_type: str,
                       session_id: str | None = None,
                       log_create: bool = True) -> SessionRuntime:
        ctx = self.context_for(image_id, defect_type)
        session = new_session(image_id, defect_type, ctx)
        sid = session_id or uuid.uuid4().hex[:12]
        log_path = self.workspace.path(f"sessions/{sid}.jsonl")
        runtime = SessionRuntime(session=session, ctx=ctx, log_path=log_path)
        if log_create:
            runtime.append_event({
                "event": "create", "session_id": sid, "image_id": image_id,
                "defect_type": defect_type, "model_id": self.model_id,
            })
        with self._sessions_lock:
            self.sessions[sid] = runtime
        return runtime

    def get(self, session_id: str) -> SessionRuntime | None:
        with self._sessions_lock:
            return self.sessions.get(session_id)

    def click(self, runtime: SessionRuntime, click: Click,
              log: bool = True) -> np.ndarray:
        mask = refine(runtime.session, click, runtime.ctx)
        if log:
            applied = runtime.session.clicks[-1]
            runtime.append_event({"event": "click", "t": applied.t,
                                  "x": applied.x, "y": applied.y,
                                  "polarity": applied.polarity})
        return mask

    def undo(self, runtime: SessionRuntime, log: bool = True) -> np.ndarray:
        mask = undo(runtime.session)
        if log:
            runtime.append_event({"event": "undo"})
        return mask

    def export(self, session_id: str, runtime: SessionRuntime) -> str:
        label = export_mask(runtime.session)
        rel = f"labels/{session_id}.png"
        save_png(label, self.workspace.path(rel))
        clicks_rel = f"labels/{session_id}.clicks.jsonl"
        lines = [json.dumps({"t": c.t, "x": c.x, "y": c.y, "polarity": c.polarity})
                 for c in runtime.session.clicks]
        self.workspace.path(clicks_rel).write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        runtime.append_event({"event": "export", "path": rel})
        return rel

    # --- crash recovery ---------------------------------------------------

    def restore_sessions(self) -> int:
        """Rebuild every logged session by replaying its event log."""
        sessions_dir = self.workspace.path("sessions")
        count = 0
        for log_file in sorted(sessions_dir.glob("*.jsonl")):
            sid = log_file.stem
            events = [json.loads(line) for line in
                      log_file.read_text(encoding="utf-8").splitlines() if line.strip()]
            if not events or events[0].get("event") != "create":
                continue
            head = events[0]
            if head["image_id"] not in self.workspace.manifest["images"]:
                continue
            if head["defect_type"] not in self.prompt_features:
                continue
            runtime = self.create_session(head["image_id"], head["defect_type"],
                                          session_id=sid, log_create=False)
            for event in events[1:]:
                if event["event"] == "click":
                    self.click(runtime, Click(x=event["x"], y=event["y"],
                                              polarity=event["polarity"]), log=False)
                elif event["event"] == "undo":
                    self.undo(runtime, log=False)
            count += 1
        return count
