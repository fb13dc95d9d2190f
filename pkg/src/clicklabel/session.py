"""Interactive annotation sessions: the click/refine/undo loop.

A session binds an image to a model, its residual tensor, and a prompt
feature. Each accepted click appends a new mask to the history, so undo
is a pop and a click log replays to a bit-identical final mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from clicklabel.clicks import Click, rasterize
from clicklabel.errors import EmptyHistoryError, InvalidInputError, SessionStateError
from clicklabel.prompts import PromptFeature
from clicklabel.refiner import RefinerParams, forward
from clicklabel.residual import ResidualTensor


@dataclass
class RefineContext:
    """Immutable engine bundle shared by every refine call of a session."""

    params: RefinerParams
    residual: ResidualTensor
    prompt_feature: PromptFeature
    height: int
    width: int
    r_click: int
    model_id: str = ""


@dataclass
class ClickSession:
    """Ordered clicks plus the mask after each one (history[0] is blank)."""

    image_id: str
    defect_type: str
    model_id: str = ""
    clicks: list[Click] = field(default_factory=list)
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.history:
            self.history = [None]  # placeholder until bound to a context

    @property
    def t(self) -> int:
        return len(self.clicks)

    @property
    def current_mask(self) -> np.ndarray:
        return self.history[-1]


def new_session(image_id: str, defect_type: str, ctx: RefineContext) -> ClickSession:
    session = ClickSession(image_id=image_id, defect_type=defect_type,
                           model_id=ctx.model_id)
    session.history = [np.zeros((ctx.height, ctx.width))]
    return session


def refine(session: ClickSession, click: Click, ctx: RefineContext) -> np.ndarray:
    """Apply one click: rasterize the full click list, run the model,
    append the new mask, and return it."""
    if ctx.params is None or ctx.residual is None:
        raise SessionStateError("session is not bound to a model and residual")
    if len(session.history) != len(session.clicks) + 1:
        raise SessionStateError("history and click list are out of step")
    if not (0 <= click.x < ctx.width and 0 <= click.y < ctx.height):
        raise InvalidInputError(
            f"click ({click.x}, {click.y}) outside {ctx.height}x{ctx.width} image"
        )
    clicks = session.clicks + [click.with_t(session.t + 1)]
    maps = rasterize(clicks, ctx.height, ctx.width, ctx.r_click)
    mask = forward(ctx.residual, maps, session.current_mask,
                   ctx.prompt_feature, ctx.params)
    session.clicks.append(clicks[-1])
    session.history.append(mask)
    return mask


def undo(session: ClickSession) -> np.ndarray:
    """Remove the last click and its mask; returns the new last mask."""
    if session.t == 0:
        raise EmptyHistoryError("no clicks to undo")
    session.clicks.pop()
    session.history.pop()
    return session.current_mask


def replay(clicks: list[Click], ctx: RefineContext,
           image_id: str = "", defect_type: str = "") -> ClickSession:
    """Rebuild a session by replaying a click log in order."""
    session = new_session(image_id, defect_type, ctx)
    for c in clicks:
        refine(session, c, ctx)
    return session


def export_mask(session: ClickSession, threshold: float = 0.5) -> np.ndarray:
    """Binary label image: uint8 with 255 marking anomalous pixels."""
    if session.current_mask is None:
        raise SessionStateError("session has no mask yet")
    return ((session.current_mask >= threshold) * 255).astype(np.uint8)
