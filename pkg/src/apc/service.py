"""HTTP inference service for a loaded checkpoint.

JSON everywhere: images travel as base64 PNG, point clouds as flat float
arrays [x0, y0, z0, x1, ...]. The model is immutable after load; the only
mutable state is an LRU cache of uploads (captured code sets keyed by the
image content hash, so re-uploading is idempotent and every cache entry is
reproducible from its source image). Errors come back as {code, message}.

Endpoints: GET /health, GET /info, POST /reconstruct, POST /sweep,
POST /swap.
"""
from __future__ import annotations

import base64
import hashlib
import io
import threading
from collections import OrderedDict

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image as PILImage
from pydantic import BaseModel

from .deformation import DeformationModel
from .manipulation import CodeSet, capture_codes, swap_sets, sweep_codes
from .training import load_checkpoint


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class ReconstructRequest(BaseModel):
    image_png_base64: str


class SweepRequest(BaseModel):
    upload_id: str
    stage: int
    dim: int
    values: list[float]


class SwapRequest(BaseModel):
    upload_a: str
    upload_b: str
    which: dict[str, list[int]] = {}


class UploadCache:
    """Bounded LRU of captured uploads; thread-safe."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._entries: OrderedDict[str, dict] = OrderedDict()

    def put(self, key: str, value: dict) -> None:
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def get(self, key: str) -> dict:
        with self._lock:
            if key not in self._entries:
                raise ServiceError(404, "unknown_upload", f"no cached upload with id {key!r}")
            self._entries.move_to_end(key)
            return self._entries[key]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def _flat_points(points: np.ndarray) -> list:
    return [float(v) for v in np.asarray(points, dtype=np.float64).reshape(-1)]


def _codes_payload(codes: CodeSet) -> dict:
    stages = [stage.z[0].tolist() for stage in codes.stages]
    return {"code_dim": len(stages[0]) if stages[0] is not None else 0, "stages": stages}


def _decode_image(payload: str, resolution: int) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
        with PILImage.open(io.BytesIO(raw)) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except ServiceError:
        raise
    except Exception as exc:
        raise ServiceError(400, "bad_image", f"could not decode PNG payload: {exc}") from exc
    if arr.shape != (resolution, resolution):
        raise ServiceError(
            400,
            "bad_resolution",
            f"expected a {resolution}x{resolution} image, got {arr.shape[1]}x{arr.shape[0]}",
        )
    return arr


def create_app(model: DeformationModel, cache_capacity: int = 64) -> FastAPI:
    if model.config.task != "reconstruct":
        raise ValueError("the inference service serves reconstruction checkpoints")
    model.eval()
    app = FastAPI(title="point-cloud attribute explorer service")
    cache = UploadCache(cache_capacity)
    config = model.config

    @app.exception_handler(ServiceError)
    async def _service_error(_req: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/info")
    def info():
        return {
            "stages": 3,
            "code_dim": config.code_dim,
            "points": config.n_points,
            "channels": list(config.channels),
            "image_resolution": config.image_resolution,
            "variant": config.variant,
        }

    @app.post("/reconstruct")
    def reconstruct(req: ReconstructRequest):
        image = _decode_image(req.image_png_base64, config.image_resolution)
        upload_id = hashlib.sha256(image.tobytes()).hexdigest()[:16]
        try:
            entry = cache.get(upload_id)
        except ServiceError:
            cloud, codes = capture_codes(model, image)
            entry = {"codes": codes, "points": cloud.points}
            cache.put(upload_id, entry)
        return {
            "upload_id": upload_id,
            "points": _flat_points(entry["points"]),
            "codes": _codes_payload(entry["codes"]),
        }

    @app.post("/sweep")
    def sweep(req: SweepRequest):
        entry = cache.get(req.upload_id)
        try:
            clouds = sweep_codes(model, entry["codes"], req.stage, req.dim, req.values)
        except ValueError as exc:
            raise ServiceError(400, "bad_request", str(exc)) from exc
        return {"count": len(clouds), "clouds": [_flat_points(c.points) for c in clouds]}

    @app.post("/swap")
    def swap(req: SwapRequest):
        entry_a = cache.get(req.upload_a)
        entry_b = cache.get(req.upload_b)
        try:
            cloud = swap_sets(model, entry_a["codes"], entry_b["codes"], req.which)
        except ValueError as exc:
            raise ServiceError(400, "bad_request", str(exc)) from exc
        return {"points": _flat_points(cloud.points)}

    return app


def create_app_from_checkpoint(path, cache_capacity: int = 64) -> FastAPI:
    model, _ = load_checkpoint(path)
    return create_app(model, cache_capacity)


def serve(checkpoint_path, host: str = "127.0.0.1", port: int = 8000) -> None:
    """Blocking: load the checkpoint and serve until shutdown."""
    import uvicorn

    app = create_app_from_checkpoint(checkpoint_path)
    uvicorn.run(app, host=host, port=port, log_level="warning")
