"""HTTP inference service: schema discovery, single-frame generation with
optional mask repair, and timeline rendering.

Checkpoints are loaded once at startup and never mutated. Requests are
validated against the character's schema before any model call; per
character, inference is serialized through a lock while separate characters
run in parallel. Long animation jobs go to a small worker pool and are
fetched by polling /jobs/{job_id}.
"""

from __future__ import annotations

import base64
import io
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .animation import (
    AnimationTimeline,
    export_frames,
    frame_times,
    frames_to_zip,
    render_timeline,
    timeline_from_json,
    validate_timeline,
)
from .connectivity import refine_pose
from .dataset import DatasetError, Pose, pose_to_json_dict, validate_pose
from .inference import InferenceSession

# Timeline jobs longer than this many frames always run in the background.
ASYNC_FRAME_THRESHOLD = 64


class PoseModel(BaseModel):
    positions: dict[int, tuple[float, float]]
    active_states: dict[int, int] = {}

    def to_pose(self) -> Pose:
        return Pose(
            positions={int(k): (float(x), float(y)) for k, (x, y) in self.positions.items()},
            active_states={int(g): int(k) for g, k in self.active_states.items()},
        )


class GenerateRequestModel(BaseModel):
    pose: PoseModel
    mask_fix: bool = False
    return_mask: bool = False
    delta: float = 0.5
    max_fix_iters: int = 5
    moved_keypoint: int | None = None
    move_vec: tuple[float, float] | None = None


@dataclass
class LoadedCharacter:
    char_id: str
    session: InferenceSession
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def name(self) -> str:
        return self.session.checkpoint.name

    def summary(self) -> dict:
        schema = self.session.schema
        return {
            "id": self.char_id,
            "name": self.name,
            "keypoint_count": len(schema.keypoints),
            "layer_count": schema.layer_count,
            "reference_resolution": list(schema.reference_resolution),
            "has_mask_head": self.session.predicts_mask,
            "state_groups": len(schema.state_groups()),
        }


@dataclass
class Job:
    status: str  # running | done | failed
    media_type: str = ""
    payload: bytes | None = None
    error: str | None = None


def load_characters(checkpoint_dir: str | Path, device: str = "cpu") -> dict[str, LoadedCharacter]:
    characters = {}
    for path in sorted(Path(checkpoint_dir).glob("*.pt")):
        session = InferenceSession.from_file(path, device=device)
        characters[path.stem] = LoadedCharacter(char_id=path.stem, session=session)
    return characters


def _png_response_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    arr = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(buf, "PNG")
    return buf.getvalue()


def create_app(characters: dict[str, LoadedCharacter]) -> FastAPI:
    app = FastAPI(title="charanim inference service")
    app.state.characters = characters
    app.state.inference_count = 0  # bumps only when a model actually runs
    app.state.jobs: dict[str, Job] = {}
    app.state.executor = ThreadPoolExecutor(max_workers=2)

    def get_character(char_id: str) -> LoadedCharacter:
        char = characters.get(char_id)
        if char is None:
            raise HTTPException(status_code=404, detail=f"unknown character {char_id!r}")
        return char

    @app.get("/characters")
    def list_characters():
        return [characters[k].summary() for k in sorted(characters)]

    @app.get("/characters/{char_id}/schema")
    def character_schema(char_id: str):
        char = get_character(char_id)
        return char.session.checkpoint.schema_json

    @app.post("/characters/{char_id}/generate")
    def generate(char_id: str, req: GenerateRequestModel):
        char = get_character(char_id)
        session = char.session
        pose = req.pose.to_pose()
        try:
            validate_pose(pose, session.schema, context="pose")
        except DatasetError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        if req.mask_fix:
            if not session.predicts_mask:
                raise HTTPException(
                    status_code=409,
                    detail="mask_fix requested but this checkpoint has no mask head",
                )
            if req.moved_keypoint is None or req.move_vec is None:
                raise HTTPException(
                    status_code=422,
                    detail="mask_fix needs moved_keypoint and move_vec to anchor the repair",
                )
            if req.moved_keypoint not in pose.positions:
                raise HTTPException(
                    status_code=422,
                    detail=f"moved_keypoint {req.moved_keypoint} has no position in the pose",
                )
            if not 0.0 <= req.delta <= 1.0:
                raise HTTPException(status_code=422, detail="delta must be in [0, 1]")
        if req.return_mask and not session.predicts_mask:
            raise HTTPException(
                status_code=409, detail="return_mask requested but this checkpoint has no mask head"
            )

        with char.lock:
            refinement = None
            if req.mask_fix:
                app.state.inference_count += 1
                refinement = refine_pose(
                    session.predict_mask,
                    pose,
                    req.moved_keypoint,
                    tuple(req.move_vec),
                    delta=req.delta,
                    max_iters=req.max_fix_iters,
                )
                pose = refinement.pose
            app.state.inference_count += 1
            image = session.generate(pose)
            mask = None
            if req.return_mask:
                app.state.inference_count += 1
                mask = session.mask_to_reference(session.predict_mask(pose))

        image_png = _png_response_bytes(image)
        if not req.mask_fix and not req.return_mask:
            return Response(content=image_png, media_type="image/png")

        body = {
            "image_png": base64.b64encode(image_png).decode(),
            "pose": pose_to_json_dict(pose),
            "refined": bool(refinement is not None and refinement.moves),
        }
        if refinement is not None:
            body["converged"] = refinement.converged
            body["moves"] = [
                {"keypoint": kp, "displacement": list(disp)} for kp, disp in refinement.moves
            ]
        if mask is not None:
            body["mask_png"] = base64.b64encode(
                _png_response_bytes(np.repeat(mask[:, :, None], 3, axis=2).astype(np.float32))
            ).decode()
        return JSONResponse(body)

    def _run_timeline(char: LoadedCharacter, timeline: AnimationTimeline, fmt: str) -> tuple[bytes, str]:
        with char.lock:
            app.state.inference_count += 1
            frames = render_timeline(timeline, char.session)
        if fmt == "gif":
            with tempfile.TemporaryDirectory() as tmp:
                out = Path(tmp) / "anim.gif"
                export_frames(frames, "gif", out, fps=timeline.fps, loop=timeline.loop)
                return out.read_bytes(), "image/gif"
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "frames.zip"
            frames_to_zip(frames, out)
            return out.read_bytes(), "application/zip"

    @app.post("/characters/{char_id}/animate")
    def animate(
        char_id: str,
        body: dict,
        format: str = Query("zip", pattern="^(zip|gif)$"),
        wait: bool = Query(True),
    ):
        char = get_character(char_id)
        try:
            timeline = timeline_from_json(body)
            validate_timeline(timeline, char.session.schema)
        except (DatasetError, ValueError, KeyError, TypeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        if timeline.mask_fix and not char.session.predicts_mask:
            raise HTTPException(
                status_code=409, detail="mask_fix requested but this checkpoint has no mask head"
            )

        n_frames = len(frame_times(timeline))
        if wait and n_frames <= ASYNC_FRAME_THRESHOLD:
            payload, media_type = _run_timeline(char, timeline, format)
            return Response(content=payload, media_type=media_type)

        job_id = uuid.uuid4().hex
        app.state.jobs[job_id] = Job(status="running")

        def work():
            try:
                payload, media_type = _run_timeline(char, timeline, format)
                app.state.jobs[job_id] = Job(status="done", media_type=media_type, payload=payload)
            except Exception as exc:  # noqa: BLE001 - job isolation
                app.state.jobs[job_id] = Job(status="failed", error=str(exc))

        app.state.executor.submit(work)
        return JSONResponse({"job_id": job_id, "status": "running"}, status_code=202)

    @app.get("/jobs/{job_id}")
    def poll_job(job_id: str):
        job = app.state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        if job.status == "running":
            return JSONResponse({"job_id": job_id, "status": "running"})
        if job.status == "failed":
            return JSONResponse({"job_id": job_id, "status": "failed", "error": job.error}, status_code=500)
        return Response(content=job.payload, media_type=job.media_type)

    return app


def serve(checkpoint_dir: str | Path, port: int = 8000, host: str = "127.0.0.1", device: str = "cpu"):
    import uvicorn

    characters = load_characters(checkpoint_dir, device=device)
    app = create_app(characters)
    uvicorn.run(app, host=host, port=port)
