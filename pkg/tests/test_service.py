import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image as PILImage

from apc.service import UploadCache, ServiceError, create_app, create_app_from_checkpoint
from apc.synthgen import load_image
from apc.training import save_checkpoint


def png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(image, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


@pytest.fixture(scope="module")
def client(micro_trained):
    model, _, _ = micro_trained
    return TestClient(create_app(model))


@pytest.fixture(scope="module")
def test_images(micro_dataset):
    recs = micro_dataset.records("test")
    return [load_image(micro_dataset.path(r, "image")) for r in recs[:2]]


def upload(client, image):
    resp = client.post("/reconstruct", json={"image_png_base64": png_b64(image)})
    assert resp.status_code == 200
    return resp.json()


class TestEndpoints:
    def test_health(self, client):
        assert client.get("/health").json() == {"status": "ok"}

    def test_info_contract(self, client):
        info = client.get("/info").json()
        assert info["stages"] == 3
        assert info["code_dim"] == 6
        assert info["points"] == 64
        assert info["channels"] == [8, 12, 16]

    def test_reconstruct_contract(self, client, test_images):
        body = upload(client, test_images[0])
        assert len(body["points"]) == 64 * 3
        assert len(body["codes"]["stages"]) == 3
        assert all(len(z) == 6 for z in body["codes"]["stages"])
        again = upload(client, test_images[0])
        assert again == body  # idempotent for identical payloads

    def test_bad_image_payload(self, client):
        resp = client.post("/reconstruct", json={"image_png_base64": "AAAA"})
        assert resp.status_code == 400
        body = resp.json()
        assert body["code"] == "bad_image" and "message" in body

    def test_wrong_resolution(self, client):
        img = np.zeros((16, 16), dtype=np.uint8)
        resp = client.post("/reconstruct", json={"image_png_base64": png_b64(img)})
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_resolution"

    def test_sweep_count(self, client, test_images):
        body = upload(client, test_images[0])
        resp = client.post(
            "/sweep",
            json={"upload_id": body["upload_id"], "stage": 2, "dim": 3, "values": [-1, 0, 1]},
        )
        assert resp.status_code == 200
        data = resp.json()
        assert data["count"] == 3
        assert len(data["clouds"]) == 3
        assert all(len(c) == 64 * 3 for c in data["clouds"])

    def test_sweep_unknown_upload(self, client):
        resp = client.post(
            "/sweep", json={"upload_id": "nope", "stage": 1, "dim": 0, "values": [0.0]}
        )
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_upload"

    def test_sweep_bad_stage(self, client, test_images):
        body = upload(client, test_images[0])
        resp = client.post(
            "/sweep", json={"upload_id": body["upload_id"], "stage": 9, "dim": 0, "values": [0.0]}
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_request"

    def test_swap_identities(self, client, test_images):
        a = upload(client, test_images[0])
        b = upload(client, test_images[1])
        every = {"z": [1, 2, 3], "mu": [1, 2, 3], "sigma": [1, 2, 3]}
        total = client.post(
            "/swap", json={"upload_a": a["upload_id"], "upload_b": b["upload_id"], "which": every}
        ).json()
        assert total["points"] == b["points"]
        empty = client.post(
            "/swap", json={"upload_a": a["upload_id"], "upload_b": b["upload_id"], "which": {}}
        ).json()
        assert empty["points"] == a["points"]

    def test_swap_repeat_deterministic(self, client, test_images):
        a = upload(client, test_images[0])
        b = upload(client, test_images[1])
        req = {"upload_a": a["upload_id"], "upload_b": b["upload_id"], "which": {"z": [1]}}
        r1 = client.post("/swap", json=req).json()
        r2 = client.post("/swap", json=req).json()
        assert r1 == r2

    def test_swap_bad_component(self, client, test_images):
        a = upload(client, test_images[0])
        resp = client.post(
            "/swap",
            json={"upload_a": a["upload_id"], "upload_b": a["upload_id"], "which": {"w": [1]}},
        )
        assert resp.status_code == 400


class TestCheckpointServing:
    def test_from_checkpoint_and_never_mutates(self, micro_trained, test_images, tmp_path):
        model, history, tc = micro_trained
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, tc, 1, history)
        before = path.read_bytes()
        app = create_app_from_checkpoint(path)
        with TestClient(app) as c:
            first = upload(c, test_images[0])
            c.post(
                "/sweep",
                json={"upload_id": first["upload_id"], "stage": 1, "dim": 0, "values": [0.5]},
            )
        assert path.read_bytes() == before

    def test_bad_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="magic"):
            create_app_from_checkpoint(path)


class TestUploadCache:
    def test_lru_eviction(self):
        cache = UploadCache(capacity=2)
        cache.put("a", {"v": 1})
        cache.put("b", {"v": 2})
        cache.get("a")
        cache.put("c", {"v": 3})  # evicts b (least recently used)
        assert len(cache) == 2
        cache.get("a")
        cache.get("c")
        with pytest.raises(ServiceError):
            cache.get("b")
