import json

import pytest
from fastapi.testclient import TestClient

from conftest import textured_png
from rescap.cot_captioner import StubCaptioner
from rescap.errors import NotFoundError
from rescap.pipeline import DataPipeline, HqImage
from rescap.restoration import RestorationClient
from rescap.service import create_app


class Clock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


def _annotatable_run(tmp_path, zooms=(4.0, 16.0), seed=21):
    hq = tmp_path / "hq"
    hq.mkdir()
    (hq / "a.png").write_bytes(textured_png(1))
    run = tmp_path / "run"
    pipeline = DataPipeline(run, seed)
    pairs = pipeline.generate_pairs([HqImage(str(hq / "a.png"))], ["stub"], list(zooms))
    captioner = StubCaptioner(
        {p.meta.image_id: p.meta.degradation_level for p in pairs}, seed=seed
    )
    restorer = RestorationClient(run)
    restorer.register_backend("stub", "stub")
    for i, pair in enumerate(pairs):
        pair = pipeline.generate_caption_candidates(pair, captioner)
        pairs[i] = pipeline.fanout_restorations(pair, restorer, "stub")
    return run, pairs


@pytest.fixture
def service(tmp_path):
    run, pairs = _annotatable_run(tmp_path)
    clock = Clock()
    app = create_app(run, lease_ttl=600.0, now=clock)
    client = TestClient(app, base_url="http://annotate.test")
    yield client, pairs, clock
    client.close()


def test_create_app_requires_existing_run_dir(tmp_path):
    with pytest.raises(NotFoundError):
        create_app(tmp_path / "nope")


def test_next_task_shape_and_tile_order(service):
    client, pairs, _ = service
    task = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    assert task["status"] == "pending"
    assert task["pair_id"] in {p.pair_id for p in pairs}
    assert task["lq_thumbnail_ref"].startswith("/images/thumb-")
    lengths = [t["effective_token_length"] for t in task["candidates"]]
    assert lengths == sorted(lengths)
    assert lengths == [77, 117, 137, 197, 257, 357, 437]
    for tile in task["candidates"]:
        assert len(tile["caption_preview"]) <= 240
        assert tile["restored_image_ref"].startswith("/images/")


def test_leases_exclude_other_annotators(service):
    client, pairs, _ = service
    a = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    b = client.get("/api/tasks/next", params={"annotator": "bob"}).json()
    assert a["pair_id"] != b["pair_id"]
    # both pairs leased; a third annotator sees an empty queue
    assert client.get("/api/tasks/next", params={"annotator": "carol"}).status_code == 204


def test_same_annotator_retry_gets_same_pair(service):
    client, _, _ = service
    a = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    again = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    assert again["pair_id"] == a["pair_id"]


def test_expired_lease_reissues_task(service):
    client, _, clock = service
    a = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    assert client.get("/api/tasks/next", params={"annotator": "bob"}).json()[
        "pair_id"
    ] != a["pair_id"]
    # every pair is leased out, carol is blocked until a lease lapses
    assert client.get("/api/tasks/next", params={"annotator": "carol"}).status_code == 204
    clock.advance(601.0)
    r = client.get("/api/tasks/next", params={"annotator": "carol"})
    assert r.status_code == 200
    # alice's lease lapsed, so her submit now fails without force
    r = client.post(
        "/api/annotations",
        json={
            "pair_id": a["pair_id"],
            "candidate_id": a["candidates"][0]["candidate_id"],
            "annotator": "alice",
        },
    )
    assert r.status_code == 409
    assert r.json()["kind"] == "StaleLeaseError"


def test_submit_happy_path_updates_progress(service):
    client, pairs, _ = service
    before = client.get("/api/progress").json()
    assert before == {
        "pending": 2,
        "done": 0,
        "per_level": {
            "light": {"pending": 1, "done": 0},
            "heavy": {"pending": 1, "done": 0},
        },
    }
    task = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    r = client.post(
        "/api/annotations",
        json={
            "pair_id": task["pair_id"],
            "candidate_id": task["candidates"][4]["candidate_id"],
            "annotator": "alice",
        },
    )
    assert r.status_code == 200
    ack = r.json()
    assert ack["status"] == "done"
    assert ack["queue_depth"] == 1
    after = client.get("/api/progress").json()
    assert after["pending"] == 1 and after["done"] == 1
    assert sum(v["pending"] for v in after["per_level"].values()) == 1
    assert sum(v["done"] for v in after["per_level"].values()) == 1


def test_submit_is_idempotent_and_single_record(service, tmp_path):
    client, pairs, clock = service
    task = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    body = {
        "pair_id": task["pair_id"],
        "candidate_id": task["candidates"][0]["candidate_id"],
        "annotator": "alice",
    }
    assert client.post("/api/annotations", json=body).status_code == 200
    clock.advance(10_000.0)  # lease long gone; identical re-submit still fine
    assert client.post("/api/annotations", json=body).status_code == 200
    rows = [
        json.loads(line)
        for line in (tmp_path / "run" / "annotations.jsonl").read_text().splitlines()
    ]
    assert len([r for r in rows if r["pair_id"] == task["pair_id"]]) == 1


def test_submit_conflict_maps_to_409(service):
    client, _, _ = service
    task = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    first = {
        "pair_id": task["pair_id"],
        "candidate_id": task["candidates"][0]["candidate_id"],
        "annotator": "alice",
    }
    client.post("/api/annotations", json=first)
    clash = dict(first, candidate_id=task["candidates"][1]["candidate_id"],
                 annotator="bob", force=True)
    r = client.post("/api/annotations", json=clash)
    assert r.status_code == 409
    assert r.json()["kind"] == "AnnotationConflictError"


def test_submit_unknown_ids_map_to_404(service):
    client, pairs, _ = service
    r = client.post(
        "/api/annotations",
        json={"pair_id": "ghost", "candidate_id": "x", "annotator": "a", "force": True},
    )
    assert r.status_code == 404
    task = client.get("/api/tasks/next", params={"annotator": "a"}).json()
    r = client.post(
        "/api/annotations",
        json={"pair_id": task["pair_id"], "candidate_id": "ghost", "annotator": "a"},
    )
    assert r.status_code == 404


def test_queue_drains_to_204(service):
    client, pairs, _ = service
    for _ in range(len(pairs)):
        task = client.get("/api/tasks/next", params={"annotator": "solo"}).json()
        client.post(
            "/api/annotations",
            json={
                "pair_id": task["pair_id"],
                "candidate_id": task["candidates"][0]["candidate_id"],
                "annotator": "solo",
            },
        )
    assert client.get("/api/tasks/next", params={"annotator": "solo"}).status_code == 204
    progress = client.get("/api/progress").json()
    assert progress["pending"] == 0 and progress["done"] == len(pairs)


def test_image_route_etag_and_traversal_guard(service):
    client, _, _ = service
    task = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    ref = task["candidates"][0]["restored_image_ref"]
    r = client.get(ref)
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    etag = r.headers["etag"]
    assert client.get(ref, headers={"If-None-Match": etag}).status_code == 304
    assert client.get("/images/../pairs.jsonl").status_code == 404
    assert client.get("/images/nope.png").status_code == 404


def test_thumbnail_is_capped_at_512(service):
    client, _, _ = service
    task = client.get("/api/tasks/next", params={"annotator": "alice"}).json()
    r = client.get(task["lq_thumbnail_ref"])
    from rescap.imaging import png_to_array

    arr = png_to_array(r.content)
    assert max(arr.shape[:2]) <= 512


def test_cot_endpoints_round_trip(service):
    client, _, _ = service
    emit = client.post(
        "/api/cot/emit", json={"predicted_length": 9, "description": "a > b"}
    ).json()
    assert emit["cot"] == "<9, a \\> b>"
    parsed = client.post("/api/cot/parse", json={"cot": emit["cot"]}).json()
    assert parsed == {"predicted_length": 9, "description": "a > b"}
    bad = client.post("/api/cot/parse", json={"cot": "no brackets"})
    assert bad.status_code == 422
    assert bad.json()["kind"] == "CoTParseError"


def test_filter_and_perturb_endpoints(service):
    client, _, _ = service
    r = client.post(
        "/api/text/filter-harmful",
        json={"text": "A dock at dawn. Quite blurry overall.", "scope": "sentence"},
    ).json()
    assert r["matched"] is True
    assert r["degradation_part"] == ["Quite blurry overall."]
    r = client.post(
        "/api/text/perturb",
        json={"text": "one two three four five six", "ratio": 0.5, "seed": 3},
    ).json()
    assert r["word_count"] == 6
    assert r["replaced"] == 3


def test_offset_endpoint_and_mismatch(service):
    client, _, _ = service
    r = client.post(
        "/api/metrics/offset",
        json={
            "annotations": [
                {"image_id": "a", "optimal_length": 100},
                {"image_id": "b", "optimal_length": 200, "acceptable_lengths": [260]},
            ],
            "predictions": [
                {"image_id": "a", "predicted_length": 130},
                {"image_id": "b", "predicted_length": 305},
            ],
        },
    )
    assert r.status_code == 200
    assert r.json() == {"mean_offset": 0.75, "count": 2}
    r = client.post(
        "/api/metrics/offset",
        json={
            "annotations": [{"image_id": "a", "optimal_length": 100}],
            "predictions": [],
        },
    )
    assert r.status_code == 422


def test_health_reports_run_dir(service, tmp_path):
    client, _, _ = service
    body = client.get("/api/health").json()
    assert body["status"] == "ok"
    assert body["run_dir"].endswith("run")


def test_ui_config_defaults_to_same_origin(service):
    client, _, _ = service
    assert client.get("/api/config").json() == {"api_base": ""}


def test_ui_bundle_is_served_and_api_routes_win(tmp_path):
    run, _ = _annotatable_run(tmp_path)
    ui = tmp_path / "dist"
    ui.mkdir()
    (ui / "index.html").write_text("<!doctype html><title>annotate</title>")
    app = create_app(run, ui_dir=ui, api_base="http://api.test")
    with TestClient(app) as client:
        assert "annotate" in client.get("/").text
        assert client.get("/api/config").json() == {"api_base": "http://api.test"}
        assert client.get("/api/progress").status_code == 200


def test_missing_ui_bundle_dir_is_rejected(tmp_path):
    run, _ = _annotatable_run(tmp_path)
    with pytest.raises(NotFoundError):
        create_app(run, ui_dir=tmp_path / "ghost")
