"""On-disk workspace: asset directories plus a JSON manifest index."""

from __future__ import annotations

import json
from pathlib import Path

from clicklabel.errors import WorkspaceError

SUBDIRS = ("images", "features", "banks", "prompts", "models", "labels", "sessions")

MANIFEST_NAME = "manifest.json"


class Workspace:
    """A rooted directory tree whose manifest registers every asset.

    The manifest may only reference files that exist; asset ids are
    unique within their section.
    """

    def __init__(self, root: str | Path, create: bool = False) -> None:
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
            for sub in SUBDIRS:
                (self.root / sub).mkdir(exist_ok=True)
        if not self.root.is_dir():
            raise WorkspaceError(f"workspace root {self.root} does not exist")
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        path = self.root / MANIFEST_NAME
        if not path.exists():
            return {
                "version": 1,
                "images": {},
                "prompts": {},
                "model": None,
                "bank": None,
                "backend": None,
                "embedder": None,
                "match": None,
            }
        manifest = json.loads(path.read_text(encoding="utf-8"))
        self._validate(manifest)
        return manifest

    def _validate(self, manifest: dict) -> None:
        for image_id, entry in manifest.get("images", {}).items():
            if not (self.root / entry["path"]).exists():
                raise WorkspaceError(f"manifest image {image_id!r} missing on disk")
        for defect, entry in manifest.get("prompts", {}).items():
            if not (self.root / entry["file"]).exists():
                raise WorkspaceError(f"manifest prompts {defect!r} missing on disk")
        for key in ("model", "bank"):
            rel = manifest.get(key)
            if rel and not (self.root / rel).exists():
                raise WorkspaceError(f"manifest {key} {rel!r} missing on disk")

    def save(self) -> None:
        self._validate(self.manifest)
        (self.root / MANIFEST_NAME).write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8"
        )

    def path(self, rel: str) -> Path:
        return self.root / rel

    # --- registration helpers ------------------------------------------

    def register_image(self, image_id: str, rel_path: str, width: int, height: int) -> None:
        if image_id in self.manifest["images"]:
            raise WorkspaceError(f"duplicate image id {image_id!r}")
        self.manifest["images"][image_id] = {
            "path": rel_path, "width": width, "height": height,
        }

    def register_prompts(self, defect: str, obj: str, rel_path: str) -> None:
        self.manifest["prompts"][defect] = {"object": obj, "file": rel_path}

    def image_entry(self, image_id: str) -> dict:
        try:
            return self.manifest["images"][image_id]
        except KeyError:
            raise WorkspaceError(f"unknown image id {image_id!r}") from None

    def defect_types(self) -> list[str]:
        return sorted(self.manifest["prompts"])
