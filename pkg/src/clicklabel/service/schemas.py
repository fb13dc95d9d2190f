"""Pydantic request/response models of the session API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class CreateSessionRequest(BaseModel):
    image_id: str
    defect_type: str


class CreateSessionResponse(BaseModel):
    session_id: str


class ImageInfo(BaseModel):
    id: str
    width: int
    height: int


class ClickRequest(BaseModel):
    x: int
    y: int
    polarity: int = Field(description="1 anomalous, 0 clean")


class MaskResponse(BaseModel):
    mask_png_base64: str
    t: int


class ExportResponse(BaseModel):
    label_path: str


class ClickOut(BaseModel):
    t: int
    x: int
    y: int
    polarity: int


class SessionState(BaseModel):
    session_id: str
    image_id: str
    defect_type: str
    model_id: str
    t: int
    clicks: list[ClickOut]
    mask_png_base64: str
