import numpy as np
import pytest
from fastapi.testclient import TestClient

from textloc.corpus import generate_corpus, ppm_bytes
from textloc.encoders import DualEncoder, EncoderConfig, Vocabulary
from textloc.geoindex import build_index
from textloc.service import LocalizeEngine, create_app


@pytest.fixture(scope="module")
def engine(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    tiles_dir = root / "tiles"
    tiles_dir.mkdir()
    records = generate_corpus(seed=3, size=24)
    vocab = Vocabulary.build([r.text for r in records])
    cfg = EncoderConfig(vocab_size=len(vocab.tokens), d_model=16, n_heads=2,
                        n_layers=1, base_context=77, context=120,
                        image_size=64, patch_size=8, embed_dim=8)
    dual = DualEncoder(cfg, seed=0)
    dual.expand_text_context()
    refs = build_index([r.osm_tile for r in records], dual)
    for r in records:
        (tiles_dir / f"{r.id}_osm.ppm").write_bytes(ppm_bytes(r.osm_tile.pixels))
    return LocalizeEngine(dual, vocab, "osm", refs, tiles_dir=str(tiles_dir),
                          heatmap_dir=str(root / "heat"))


@pytest.fixture(scope="module")
def client(engine):
    return TestClient(create_app(engine), raise_server_exceptions=False)


@pytest.fixture(scope="module")
def center(engine):
    t = engine.refs[0].tile
    return t.lat, t.lon


class TestHealth:
    def test_healthz(self, client):
        r = client.get("/healthz")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert body["modality"] == "osm"
        assert body["references"] == 24


class TestLocalize:
    def test_basic(self, client, center):
        r = client.post("/localize", json={
            "text": "a cafe on the left", "lat": center[0], "lon": center[1],
            "M": 10, "K": 5,
        })
        assert r.status_code == 200
        body = r.json()
        assert body["v"] == 1
        assert body["session_id"].startswith("sess-")
        assert len(body["candidates"]) == 5
        sims = [c["similarity"] for c in body["candidates"]]
        assert sims == sorted(sims, reverse=True)

    def test_deterministic(self, client, center):
        payload = {"text": "a road", "lat": center[0], "lon": center[1],
                   "M": 10, "K": 3}
        a = client.post("/localize", json=payload).json()
        b = client.post("/localize", json=payload).json()
        assert [c["tile_id"] for c in a["candidates"]] == \
            [c["tile_id"] for c in b["candidates"]]

    def test_invalid_coordinates(self, client):
        r = client.post("/localize", json={"text": "x", "lat": 89.0, "lon": 0.0})
        assert r.status_code == 400
        assert "error" in r.json()

    def test_invalid_window(self, client, center):
        r = client.post("/localize", json={
            "text": "x", "lat": center[0], "lon": center[1], "M": 3, "K": 10,
        })
        assert r.status_code == 400

    def test_missing_field(self, client):
        r = client.post("/localize", json={"lat": 40.0, "lon": -74.0})
        assert r.status_code == 422

    def test_malformed_json(self, client):
        r = client.post("/localize", content=b"{not json",
                        headers={"content-type": "application/json"})
        assert 400 <= r.status_code < 500

    @pytest.mark.parametrize("payload", [
        {"text": 5, "lat": 40.7, "lon": -74.0},
        {"text": "x", "lat": "north", "lon": -74.0},
        {"text": "x", "lat": 40.7, "lon": -74.0, "K": "many"},
        [],
        "just a string",
    ])
    def test_fuzzed_bodies_are_4xx(self, client, payload):
        r = client.post("/localize", json=payload)
        assert 400 <= r.status_code < 500

    def test_explain_enriches_top5(self, client, center):
        r = client.post("/localize", json={
            "text": "a cafe named burger mania", "lat": center[0],
            "lon": center[1], "M": 10, "K": 5, "explain": True,
        })
        assert r.status_code == 200
        body = r.json()
        for c in body["candidates"][:5]:
            assert c["confidence"] is not None
            assert 0.0 <= c["confidence"] <= 1.0
            assert c["rationale"]
            assert c["heatmap"] is not None
            assert isinstance(c["text_token_scores"], list)

    def test_no_index_503(self, engine):
        empty = LocalizeEngine(engine.dual, engine.vocab, "osm", [])
        c = TestClient(create_app(empty), raise_server_exceptions=False)
        r = c.post("/localize", json={"text": "x", "lat": 40.7, "lon": -74.02})
        assert r.status_code == 503


class TestRefine:
    def test_roundtrip_replaces_candidates(self, client, center):
        first = client.post("/localize", json={
            "text": "a road", "lat": center[0], "lon": center[1],
            "M": 10, "K": 5,
        }).json()
        sid = first["session_id"]
        second = client.post("/refine", json={
            "session_id": sid, "extra_text": "with a cafe named golden dragon",
        })
        assert second.status_code == 200
        body = second.json()
        assert body["session_id"] == sid
        assert len(body["candidates"]) == 5

    def test_unknown_session(self, client):
        r = client.post("/refine", json={"session_id": "sess-99999",
                                         "extra_text": "x"})
        assert r.status_code == 404

    def test_empty_extra_text_reruns_same_query(self, client, center):
        first = client.post("/localize", json={
            "text": "a road", "lat": center[0], "lon": center[1],
            "M": 10, "K": 3,
        }).json()
        second = client.post("/refine", json={
            "session_id": first["session_id"], "extra_text": "",
        }).json()
        assert [c["tile_id"] for c in second["candidates"]] == \
            [c["tile_id"] for c in first["candidates"]]


class TestRerank:
    def test_requires_confidences(self, client, center):
        first = client.post("/localize", json={
            "text": "a road", "lat": center[0], "lon": center[1],
            "M": 10, "K": 5,
        }).json()
        r = client.post("/rerank", json={"session_id": first["session_id"]})
        assert r.status_code == 400

    def test_forced_rerank_after_explain(self, client, center):
        first = client.post("/localize", json={
            "text": "a cafe", "lat": center[0], "lon": center[1],
            "M": 10, "K": 5, "explain": True,
        }).json()
        r = client.post("/rerank", json={"session_id": first["session_id"]})
        assert r.status_code == 200
        body = r.json()
        assert body["reranked"] is True
        assert sorted(c["tile_id"] for c in body["candidates"]) == \
            sorted(c["tile_id"] for c in first["candidates"])
        scores = [c["combined_score"] for c in body["candidates"]]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_session(self, client):
        r = client.post("/rerank", json={"session_id": "nope"})
        assert r.status_code == 404


class TestTilesAndHeatmaps:
    def test_tile_served_as_ppm(self, client, engine):
        tid = engine.refs[0].tile.id
        r = client.get(f"/tiles/{tid}")
        assert r.status_code == 200
        assert r.content.startswith(b"P6\n")

    def test_unknown_tile(self, client):
        assert client.get("/tiles/nothere").status_code == 404

    def test_heatmap_served_after_explain(self, client, center):
        body = client.post("/localize", json={
            "text": "a cafe", "lat": center[0], "lon": center[1],
            "M": 10, "K": 5, "explain": True,
        }).json()
        ref = body["candidates"][0]["heatmap"]
        assert ref.startswith("/heatmaps/")
        r = client.get(ref)
        assert r.status_code == 200
        assert r.content.startswith(b"P5\n")

    def test_unknown_heatmap(self, client):
        assert client.get("/heatmaps/absent").status_code == 404


class TestSessions:
    def test_lru_eviction(self, engine, center):
        small = LocalizeEngine(engine.dual, engine.vocab, "osm", engine.refs,
                               max_sessions=2)
        c = TestClient(create_app(small), raise_server_exceptions=False)
        sids = []
        for _ in range(3):
            body = c.post("/localize", json={
                "text": "a road", "lat": center[0], "lon": center[1],
                "M": 5, "K": 2,
            }).json()
            sids.append(body["session_id"])
        assert small.get_session(sids[0]) is None
        assert small.get_session(sids[1]) is not None
        assert small.get_session(sids[2]) is not None
