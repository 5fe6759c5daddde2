import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from cnerf.scene import oracle_part_mask, save_dataset
from cnerf.service import create_app


@pytest.fixture(scope="module")
def service_env(tmp_path_factory, trained_setup):
    ds, params, settings = trained_setup
    root = tmp_path_factory.mktemp("svc")
    ckpt_dir = root / "checkpoints"
    data_dir = root / "datasets"
    ckpt_dir.mkdir()
    save_dataset(ds, data_dir / "demo")
    params.save(ckpt_dir / "model.cre", extra_config={
        "dataset_fingerprint": __import__("cnerf.scene", fromlist=["load_dataset"])
        .load_dataset(data_dir / "demo").fingerprint(),
        "render": {"n_coarse": settings.n_coarse, "n_fine": settings.n_fine,
                   "background": list(settings.background),
                   "tile_rays": settings.tile_rays},
    })
    app = create_app(str(ckpt_dir), str(data_dir))
    return TestClient(app), ds


def open_session(client):
    r = client.post("/sessions", json={"checkpoint": "model.cre", "dataset": "demo"})
    assert r.status_code == 201, r.text
    return r.json()["session_id"]


def seat_scribble(ds, view=0, n=20):
    seat = ds.instances[0].part_indices("seat")[0]
    mask = oracle_part_mask(ds.instances[0], ds.camera(view), seat)
    fg = np.argwhere(mask)[:n].tolist()
    bg = np.argwhere(~mask)[:n].tolist()
    return {"view_id": view, "fg": fg, "bg": bg}


def submit_and_wait(client, sid, body, timeout=120.0):
    r = client.post(f"/sessions/{sid}/edits", json=body)
    assert r.status_code == 202, r.text
    job_id = r.json()["job_id"]
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get(f"/edits/{job_id}").json()
        if status["state"] in ("done", "failed", "cancelled"):
            return job_id, status
        time.sleep(0.05)
    raise TimeoutError("job did not finish")


def test_session_missing_files(service_env):
    client, ds = service_env
    assert client.post("/sessions", json={"checkpoint": "nope.cre",
                                          "dataset": "demo"}).status_code == 404
    assert client.post("/sessions", json={"checkpoint": "model.cre",
                                          "dataset": "nope"}).status_code == 404


def test_session_config_hash_mismatch_409(service_env, tmp_path, trained_setup):
    client, ds = service_env
    _, params, settings = trained_setup
    # a checkpoint claiming a different dataset fingerprint is refused
    import shutil

    from cnerf.service import create_app
    from fastapi.testclient import TestClient

    ckpt_dir = tmp_path / "ck"
    ckpt_dir.mkdir()
    params.save(ckpt_dir / "wrong.cre", extra_config={"dataset_fingerprint": "bogus"})
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    save_dir = data_dir / "demo"
    from cnerf.scene import save_dataset as _save

    _save(ds, save_dir)
    local = TestClient(create_app(str(ckpt_dir), str(data_dir)))
    r = local.post("/sessions", json={"checkpoint": "wrong.cre", "dataset": "demo"})
    assert r.status_code == 409


def test_instances_listing(service_env):
    client, ds = service_env
    sid = open_session(client)
    r = client.get(f"/sessions/{sid}/instances")
    assert r.status_code == 200
    assert len(r.json()["instances"]) == ds.instance_count


def test_render_etag_stable_and_res(service_env):
    client, ds = service_env
    sid = open_session(client)
    url = f"/sessions/{sid}/render?instance=0&view=0&res=32"
    r1 = client.get(url)
    r2 = client.get(url)
    assert r1.status_code == 200
    assert r1.headers["etag"] == r2.headers["etag"]
    assert r1.content == r2.content
    with Image.open(io.BytesIO(r1.content)) as im:
        assert im.size == (32, 32)
    r3 = client.get(url, headers={"If-None-Match": r1.headers["etag"]})
    assert r3.status_code == 304


def test_render_bad_pose_422(service_env):
    client, ds = service_env
    sid = open_session(client)
    r = client.get(f"/sessions/{sid}/render?instance=0&pose=not-json")
    assert r.status_code == 422


def test_edit_job_lifecycle_undo_and_etag_change(service_env):
    client, ds = service_env
    sid = open_session(client)
    url = f"/sessions/{sid}/render?instance=0&view=0&res=24"
    etag_before = client.get(url).headers["etag"]

    body = {"kind": "color", "instance": 0, "target_color": [1.0, 0.0, 0.0],
            "scribbles": [seat_scribble(ds)],
            "hyper": {"iterations": 5, "seed": 2}}
    job_id, status = submit_and_wait(client, sid, body)
    assert status["state"] == "done"
    assert status["iteration"] == 5

    etag_after = client.get(url).headers["etag"]
    assert etag_after != etag_before

    r = client.post(f"/sessions/{sid}/undo")
    assert r.status_code == 200 and r.json()["reverted_job_id"] == job_id
    etag_reverted = client.get(url).headers["etag"]
    assert etag_reverted != etag_after
    # empty history
    assert client.post(f"/sessions/{sid}/undo").status_code == 409


def test_busy_session_rejects_second_job(service_env):
    client, ds = service_env
    sid = open_session(client)
    body = {"kind": "color", "instance": 0, "target_color": [0.0, 0.0, 1.0],
            "scribbles": [seat_scribble(ds)],
            "hyper": {"iterations": 60, "seed": 3}}
    first = client.post(f"/sessions/{sid}/edits", json=body)
    assert first.status_code == 202
    second = client.post(f"/sessions/{sid}/edits", json=body)
    assert second.status_code == 409
    job_id = first.json()["job_id"]
    client.post(f"/edits/{job_id}/cancel")
    # wait for terminal state
    for _ in range(200):
        if client.get(f"/edits/{job_id}").json()["state"] in ("cancelled", "done"):
            break
        time.sleep(0.05)


def test_cancel_leaves_parameters_untouched(service_env):
    client, ds = service_env
    sid = open_session(client)
    url = f"/sessions/{sid}/render?instance=0&view=1&res=24"
    etag_before = client.get(url).headers["etag"]
    body = {"kind": "color", "instance": 0, "target_color": [0.0, 1.0, 0.0],
            "scribbles": [seat_scribble(ds, view=1)],
            "hyper": {"iterations": 400, "seed": 4}}
    r = client.post(f"/sessions/{sid}/edits", json=body)
    job_id = r.json()["job_id"]
    cancel = client.post(f"/edits/{job_id}/cancel")
    assert cancel.status_code == 200
    status = cancel.json()
    assert status["state"] in ("cancelled", "done")
    if status["state"] == "cancelled":
        assert client.get(url).headers["etag"] == etag_before


def test_malformed_scribble_422(service_env):
    client, ds = service_env
    sid = open_session(client)
    body = {"kind": "color", "instance": 0, "target_color": [1, 0, 0],
            "scribbles": [{"view_id": 0, "fg": [[1, 1]], "bg": [[1, 1]]}],
            "hyper": {"iterations": 1}}
    assert client.post(f"/sessions/{sid}/edits", json=body).status_code == 422


def test_session_isolation(service_env):
    client, ds = service_env
    sid_a = open_session(client)
    sid_b = open_session(client)
    url_b = f"/sessions/{sid_b}/render?instance=0&view=0&res=24"
    before_b = client.get(url_b).content
    body = {"kind": "color", "instance": 0, "target_color": [1.0, 0.0, 0.0],
            "scribbles": [seat_scribble(ds)], "hyper": {"iterations": 4, "seed": 5}}
    submit_and_wait(client, sid_a, body)
    assert client.get(url_b).content == before_b


def test_idempotency_key_replays_response(service_env):
    client, ds = service_env
    sid = open_session(client)
    body = {"kind": "color", "instance": 0, "target_color": [1.0, 1.0, 0.0],
            "scribbles": [seat_scribble(ds)], "hyper": {"iterations": 2, "seed": 6}}
    headers = {"Idempotency-Key": "retry-123"}
    r1 = client.post(f"/sessions/{sid}/edits", json=body, headers=headers)
    job1 = r1.json()["job_id"]
    for _ in range(200):
        if client.get(f"/edits/{job1}").json()["state"] == "done":
            break
        time.sleep(0.05)
    r2 = client.post(f"/sessions/{sid}/edits", json=body, headers=headers)
    assert r2.json()["job_id"] == job1  # replayed, not a new job


def test_transfer_preview_and_commit(service_env):
    client, ds = service_env
    sid = open_session(client)
    r = client.post(f"/sessions/{sid}/transfer",
                    json={"instance": 0, "donor": 0, "what": "color"})
    assert r.status_code == 200
    uris = r.json()["previews"]
    assert uris
    preview = client.get(uris[0])
    assert preview.status_code == 200
    # self-transfer previews equal current renders at the same view/res
    url = f"/sessions/{sid}/render?instance=0&view={ds.heldout_view_ids()[0]}&res=64"
    assert preview.content == client.get(url).content

    url_before = client.get(url).headers["etag"]
    commit = client.post(f"/sessions/{sid}/transfer/commit",
                         json={"instance": 0, "donor": 1, "what": "color"})
    assert commit.status_code == 200
    assert client.get(url).headers["etag"] != url_before
    assert client.post(f"/sessions/{sid}/undo").status_code == 200


def test_job_preview_renders_committed_iteration(service_env):
    client, ds = service_env
    sid = open_session(client)
    body = {"kind": "color", "instance": 0, "target_color": [0.9, 0.1, 0.9],
            "scribbles": [seat_scribble(ds)], "hyper": {"iterations": 6, "seed": 9}}
    job_id, status = submit_and_wait(client, sid, body)
    preview = client.get(status["preview_uri"])
    assert preview.status_code == 200
    with Image.open(io.BytesIO(preview.content)) as im:
        assert im.size == (64, 64)


def test_scribble_echo_roundtrip(service_env):
    client, ds = service_env
    sid = open_session(client)
    scribble = seat_scribble(ds)
    r = client.post(f"/sessions/{sid}/scribbles/echo", json=scribble)
    assert r.status_code == 200
    with Image.open(io.BytesIO(r.content)) as im:
        mask = np.asarray(im)
    res = ds.resolution
    expected = np.zeros((res, res), dtype=np.uint8)
    for rr, cc in scribble["fg"]:
        expected[rr, cc] = 1
    for rr, cc in scribble["bg"]:
        expected[rr, cc] = 2
    np.testing.assert_array_equal(mask, expected)


def test_openapi_document_available(service_env):
    client, ds = service_env
    spec = client.get("/openapi.json")
    assert spec.status_code == 200
    paths = spec.json()["paths"]
    assert "/sessions" in paths
    assert "/sessions/{sid}/render" in paths
