"""HTTP session service for the editing UI.

Sessions hold a working copy of a trained checkpoint plus the dataset it
was trained on. Edits run as background jobs against a clone of the
session parameters and are committed atomically on completion, so readers
only ever observe pre-edit or post-edit state; an undo stack of parameter
deltas supports exact reverts. Mutating endpoints honor an
``Idempotency-Key`` header by replaying the recorded response.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .edit import EditDiverged, EditError, EditRequest, Scribble, apply_transfer, run_edit
from .field import FieldParameters
from .render import Camera, RenderSettings, _view_seed, render_view
from .scene import load_dataset

PREVIEW_RES = 64


@dataclass
class Job:
    job_id: str
    session_id: str
    total: int
    instance: int = 0
    state: str = "queued"  # queued | running | done | failed | cancelled
    iteration: int = 0
    loss: float | None = None
    error: str | None = None
    cancel_event: threading.Event = field(default_factory=threading.Event)
    thread: threading.Thread | None = None
    result: object = None
    # values of the trainable subset after the last finished iteration;
    # previews render from these so readers never see mid-step parameters
    preview_values: dict | None = None
    preview_lock: threading.Lock = field(default_factory=threading.Lock)
    preview_view: int | None = None

    def status(self) -> dict:
        return {
            "job_id": self.job_id,
            "state": self.state,
            "iteration": self.iteration,
            "total": self.total,
            "loss": self.loss,
            "error": self.error,
            "preview_uri": f"/edits/{self.job_id}/preview",
        }


@dataclass
class Session:
    session_id: str
    params: FieldParameters
    dataset: object
    settings: RenderSettings
    lock: threading.Lock = field(default_factory=threading.Lock)
    history: list = field(default_factory=list)  # (job_id, delta_old, delta_new)
    active_job: str | None = None
    previews: dict = field(default_factory=dict)
    idempotency: dict = field(default_factory=dict)

    def cameras(self) -> dict:
        return {v: self.dataset.camera(v) for v in
                range(len(self.dataset.cameras))}


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    arr = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


def create_app(checkpoint_dir: str, dataset_dir: str, ui_dir: str | None = None,
               settings: RenderSettings | None = None) -> FastAPI:
    app = FastAPI(title="cnerf editing service", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"], expose_headers=["ETag"])
    sessions: dict[str, Session] = {}
    jobs: dict[str, Job] = {}
    creation_idempotency: dict[str, tuple] = {}
    default_settings = settings or RenderSettings.desk()

    def get_session(sid: str) -> Session | None:
        return sessions.get(sid)

    def replay_or_record(session: Session, request: Request, compute):
        key = request.headers.get("Idempotency-Key")
        if key and key in session.idempotency:
            status, payload = session.idempotency[key]
            return JSONResponse(payload, status_code=status)
        response = compute()
        if key and isinstance(response, JSONResponse):
            session.idempotency[key] = (response.status_code,
                                        json.loads(bytes(response.body)))
        return response

    # --- session lifecycle ---

    @app.post("/sessions")
    def create_session(body: dict, request: Request):
        key = request.headers.get("Idempotency-Key")
        if key and key in creation_idempotency:
            status, payload = creation_idempotency[key]
            return JSONResponse(payload, status_code=status)
        checkpoint = os.path.join(checkpoint_dir, body.get("checkpoint", ""))
        dataset_path = os.path.join(dataset_dir, body.get("dataset", ""))
        if not os.path.exists(checkpoint):
            return _error(404, f"checkpoint not found: {body.get('checkpoint')}")
        if not os.path.exists(os.path.join(dataset_path, "manifest.json")):
            return _error(404, f"dataset not found: {body.get('dataset')}")
        params, config = FieldParameters.load(checkpoint)
        dataset = load_dataset(dataset_path)
        expected = config.get("dataset_fingerprint")
        if expected and expected != dataset.fingerprint():
            return _error(409, "checkpoint/dataset config hash mismatch")
        render_cfg = config.get("render")
        sess_settings = RenderSettings(**{**render_cfg, "background": tuple(
            render_cfg.get("background", (1, 1, 1)))}) if render_cfg else default_settings
        sid = uuid.uuid4().hex[:12]
        sessions[sid] = Session(sid, params, dataset, sess_settings)
        if key:
            creation_idempotency[key] = (201, {"session_id": sid})
        return JSONResponse({"session_id": sid}, status_code=201)

    @app.get("/sessions/{sid}/instances")
    def list_instances(sid: str):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")
        items = [{"id": k,
                  "thumbnail_uri": f"/sessions/{sid}/render?instance={k}&view="
                                   f"{session.dataset.train_view_ids()[0]}&res={PREVIEW_RES}"}
                 for k in range(session.dataset.instance_count)]
        return {"instances": items}

    # --- rendering ---

    @app.get("/sessions/{sid}/render")
    def render_endpoint(sid: str, request: Request, instance: int = 0,
                        view: int | None = None, pose: str | None = None,
                        res: int | None = None, quality: str = "full"):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")
        if not 0 <= instance < session.dataset.instance_count:
            return _error(404, f"instance {instance} out of range")
        seed = 0
        if pose is not None:
            try:
                pose_mat = np.asarray(json.loads(pose), dtype=np.float64)
                base = session.dataset.camera(0)
                camera = Camera(pose_mat, base.focal, base.width, base.height,
                                base.near, base.far)
            except (ValueError, json.JSONDecodeError) as e:
                return _error(422, f"bad pose: {e}")
        elif view is not None:
            try:
                camera = session.dataset.camera(view)
            except IndexError:
                return _error(404, f"view {view} out of range")
            seed = _view_seed(0, view)
        else:
            camera = session.dataset.camera(0)
            seed = _view_seed(0, 0)
        if res:
            scale = res / camera.width
            camera = Camera(camera.pose, camera.focal * scale, res, res,
                            camera.near, camera.far)
        query = str(sorted(request.query_params.items()))
        etag = hashlib.sha1(
            f"{sid}:{session.params.version}:{query}".encode()).hexdigest()[:16]
        if request.headers.get("If-None-Match") == etag:
            return Response(status_code=304)
        with session.lock:
            rendered = render_view(session.params, camera, instance=instance,
                                   settings=session.settings, seed=seed,
                                   quality=quality)
        return Response(content=_png_bytes(rendered.rgb), media_type="image/png",
                        headers={"ETag": etag})

    # --- edits ---

    @app.post("/sessions/{sid}/edits")
    def submit_edit(sid: str, body: dict, request: Request):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")

        def compute():
            if session.active_job and jobs[session.active_job].state in ("queued", "running"):
                return _error(409, "a job is already running for this session")
            try:
                edit_request = EditRequest.from_dict(body)
            except (EditError, KeyError, TypeError, ValueError) as e:
                return _error(422, f"malformed edit request: {e}")
            job = Job(job_id=uuid.uuid4().hex[:12], session_id=sid,
                      total=edit_request.hyper.iterations,
                      instance=edit_request.instance)
            if edit_request.scribbles:
                job.preview_view = edit_request.scribbles[0].view_id
            jobs[job.job_id] = job
            session.active_job = job.job_id
            job.thread = threading.Thread(
                target=_run_job, args=(session, job, edit_request), daemon=True)
            job.state = "running"
            job.thread.start()
            return JSONResponse({"job_id": job.job_id}, status_code=202)

        return replay_or_record(session, request, compute)

    def _run_job(session: Session, job: Job, edit_request: EditRequest):
        from .edit import select_trainable

        working = session.params.clone()
        trainable = select_trainable(working, edit_request.kind,
                                     edit_request.instance,
                                     edit_request.trainable_scope)

        def progress(iteration, total, loss):
            # runs between iterations, so these values are a committed state
            job.iteration = iteration
            job.loss = loss
            with job.preview_lock:
                job.preview_values = {p.name: p.data.copy() for p in trainable}

        try:
            result = run_edit(working, edit_request, session.cameras(),
                              settings=session.settings, progress_cb=progress,
                              cancel_event=job.cancel_event)
        except (EditError, EditDiverged) as e:
            job.state = "failed"
            job.error = str(e)
            return
        if result.cancelled:
            job.state = "cancelled"
            return
        with session.lock:
            if result.delta_new:
                session.params.store.restore(result.delta_new)
                session.params.note_updated(result.delta_new.keys())
                session.history.append((job.job_id, result.delta_old, result.delta_new))
        job.result = result
        job.state = "done"

    @app.get("/edits/{jid}")
    def job_status(jid: str):
        job = jobs.get(jid)
        if job is None:
            return _error(404, "no such job")
        return job.status()

    @app.post("/edits/{jid}/cancel")
    def cancel_job(jid: str, request: Request):
        job = jobs.get(jid)
        if job is None:
            return _error(404, "no such job")
        session = get_session(job.session_id)

        def compute():
            if job.state in ("queued", "running"):
                job.cancel_event.set()
                if job.thread is not None:
                    job.thread.join(timeout=60.0)
            return JSONResponse(job.status())

        return replay_or_record(session, request, compute) if session else compute()

    @app.get("/edits/{jid}/preview")
    def job_preview(jid: str):
        job = jobs.get(jid)
        if job is None:
            return _error(404, "no such job")
        session = get_session(job.session_id)
        if session is None:
            return _error(404, "no preview available")
        with session.lock:
            params = session.params.clone()
        with job.preview_lock:
            if job.preview_values:
                params.store.restore(job.preview_values)
        view = job.preview_view if job.preview_view is not None \
            else session.dataset.train_view_ids()[0]
        camera = session.dataset.camera(view)
        scale = PREVIEW_RES / camera.width
        camera = Camera(camera.pose, camera.focal * scale, PREVIEW_RES, PREVIEW_RES,
                        camera.near, camera.far)
        rendered = render_view(params, camera, instance=job.instance,
                               settings=session.settings, seed=0)
        return Response(content=_png_bytes(rendered.rgb), media_type="image/png")

    @app.post("/sessions/{sid}/undo")
    def undo(sid: str, request: Request):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")

        def compute():
            with session.lock:
                if not session.history:
                    return _error(409, "nothing to undo")
                job_id, delta_old, _ = session.history.pop()
                session.params.store.restore(delta_old)
                session.params.note_updated(delta_old.keys())
            return JSONResponse({"reverted_job_id": job_id})

        return replay_or_record(session, request, compute)

    # --- transfers ---

    @app.post("/sessions/{sid}/transfer")
    def transfer_preview(sid: str, body: dict, request: Request):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")
        donor = body.get("donor")
        what = body.get("what", "color")
        instance = body.get("instance", 0)
        if donor is None or not 0 <= donor < session.dataset.instance_count:
            return _error(404, f"donor {donor} out of range")

        def compute():
            from .edit import transfer_codes

            view_ids = session.dataset.heldout_view_ids()[:2] or [0]
            cams = {}
            for v in view_ids:
                cam = session.dataset.camera(v)
                scale = PREVIEW_RES / cam.width
                cams[v] = Camera(cam.pose, cam.focal * scale, PREVIEW_RES,
                                 PREVIEW_RES, cam.near, cam.far)
            with session.lock:
                previews = transfer_codes(session.params, instance, donor, what,
                                          cams, session.settings)
            uris = []
            for v, rendered in previews.items():
                pid = f"transfer_{uuid.uuid4().hex[:8]}"
                session.previews[pid] = _png_bytes(rendered.rgb)
                uris.append(f"/sessions/{sid}/previews/{pid}")
            return JSONResponse({"previews": uris})

        return replay_or_record(session, request, compute)

    @app.post("/sessions/{sid}/transfer/commit")
    def transfer_commit(sid: str, body: dict, request: Request):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")
        donor = body.get("donor")
        what = body.get("what", "color")
        instance = body.get("instance", 0)
        if donor is None or not 0 <= donor < session.dataset.instance_count:
            return _error(404, f"donor {donor} out of range")

        def compute():
            with session.lock:
                old, new = apply_transfer(session.params, instance, donor, what)
                session.history.append((f"transfer_{what}", old, new))
            return JSONResponse({"committed": what})

        return replay_or_record(session, request, compute)

    @app.get("/sessions/{sid}/previews/{pid}")
    def preview_image(sid: str, pid: str):
        session = get_session(sid)
        if session is None or pid not in session.previews:
            return _error(404, "no such preview")
        return Response(content=session.previews[pid], media_type="image/png")

    # --- scribble echo (mask round-trip check for clients) ---

    @app.post("/sessions/{sid}/scribbles/echo")
    def scribble_echo(sid: str, body: dict):
        session = get_session(sid)
        if session is None:
            return _error(404, "no such session")
        try:
            scribble = Scribble.from_dict(body)
        except (EditError, KeyError, ValueError) as e:
            return _error(422, f"malformed scribble: {e}")
        res = session.dataset.resolution
        try:
            scribble.validate_bounds(res, res)
        except EditError as e:
            return _error(422, str(e))
        mask = scribble.to_mask(res, res)
        buf = io.BytesIO()
        Image.fromarray(mask, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    if ui_dir and os.path.isdir(ui_dir):
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
