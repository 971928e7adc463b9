"""HTTP JSON API for interactive localization: localize / refine / re-rank
endpoints plus tile and heatmap serving. Sessions live in memory with LRU
eviction; the engine state (model, index, tiles) is immutable per process.
"""

from __future__ import annotations

import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .autodiff import ContractError
from .corpus import ppm_bytes, read_ppm
from .encoders import DualEncoder, Vocabulary, tokenize
from .explain import (
    Candidate,
    ExplainRequest,
    MockExplainer,
    RankedCandidates,
    confidence_rerank,
)
from .geoindex import MERCATOR_LAT_BOUND, ReferenceEntry, neighborhood, retrieve
from .relevance import (
    capture_traces,
    image_relevance,
    text_relevance,
    write_pgm,
)

API_VERSION = 1
RERANK_TOP_N = 5


@dataclass
class Session:
    id: str
    description: str
    modality: str
    center: tuple[float, float]
    M: int
    K: int
    explain: bool
    last_ranked: RankedCandidates | None = None
    history: list[str] = field(default_factory=list)


class LocalizeEngine:
    """Shared immutable model/index plus the mutable session map."""

    def __init__(self, dual: DualEncoder, vocab: Vocabulary, modality: str,
                 refs: list[ReferenceEntry], tiles_dir=None, heatmap_dir=None,
                 explainer=None, max_sessions: int = 1000):
        self.dual = dual
        self.vocab = vocab
        self.modality = modality
        self.refs = refs
        self.tiles_dir = tiles_dir
        self.heatmap_dir = heatmap_dir
        self.explainer = explainer or MockExplainer()
        self.max_sessions = max_sessions
        self.sessions: OrderedDict[str, Session] = OrderedDict()
        self._lock = threading.Lock()
        self._counter = 0

    def _new_session(self, **kw) -> Session:
        with self._lock:
            self._counter += 1
            sess = Session(id=f"sess-{self._counter}", **kw)
            self.sessions[sess.id] = sess
            while len(self.sessions) > self.max_sessions:
                self.sessions.popitem(last=False)
        return sess

    def get_session(self, sid: str) -> Session | None:
        with self._lock:
            sess = self.sessions.get(sid)
            if sess is not None:
                self.sessions.move_to_end(sid)
            return sess

    def tile_pixels(self, tile_id: str) -> np.ndarray | None:
        if self.tiles_dir is None:
            return None
        path = os.path.join(self.tiles_dir, f"{tile_id}.ppm")
        if not os.path.exists(path):
            return None
        return read_ppm(path)

    def run(self, sess: Session) -> dict:
        """Full pipeline for the session's current description."""
        seq = tokenize(sess.description, self.vocab, self.dual.config)
        emb, _ = self.dual.encode_text([seq])
        window = neighborhood(self.refs, sess.center, min(sess.M, len(self.refs)))
        k = min(sess.K, len(window))
        result = retrieve(emb.data[0], window, k)
        by_id = {r.tile.id: r for r in window}
        cands = [
            Candidate(id=cid, similarity=sim, lat=coord[0], lon=coord[1])
            for cid, sim, coord in zip(
                result.candidate_ids, result.similarities, result.candidate_coords
            )
        ]
        reranked = False
        extras: dict[str, dict] = {}
        if sess.explain:
            for cand in cands[:RERANK_TOP_N]:
                extras[cand.id] = self._explain_candidate(sess, seq, cand, by_id[cand.id])
            if len(cands) >= RERANK_TOP_N:
                head = RankedCandidates(entries=cands[:RERANK_TOP_N])
                ranked = confidence_rerank(head)
                cands = ranked.entries + cands[RERANK_TOP_N:]
                reranked = ranked.reranked
        sess.last_ranked = RankedCandidates(entries=cands, reranked=reranked)
        return {
            "v": API_VERSION,
            "session_id": sess.id,
            "modality": sess.modality,
            "reranked": reranked,
            "candidates": [
                {
                    "tile_id": c.id,
                    "lat": c.lat,
                    "lon": c.lon,
                    "similarity": c.similarity,
                    "confidence": c.confidence,
                    "rationale": c.rationale,
                    "heatmap": extras.get(c.id, {}).get("heatmap"),
                    "text_token_scores": extras.get(c.id, {}).get("tokens", []),
                }
                for c in cands
            ],
        }

    def _explain_candidate(self, sess: Session, seq, cand: Candidate,
                           ref: ReferenceEntry) -> dict:
        pixels = self.tile_pixels(cand.id)
        tile = (np.asarray(pixels, dtype=np.float64) / 255.0 if pixels is not None
                else np.zeros((self.dual.config.image_size,) * 2 + (3,)))
        _, t_trace, v_trace = capture_traces(self.dual, seq, tile)
        t_rel = text_relevance(t_trace, seq)
        v_rel = image_relevance(
            v_trace, self.dual.config.patch_grid, self.dual.config.image_size
        )
        words = [self.vocab.tokens[t] for t in seq.ids
                 if t >= 4 and t < len(self.vocab.tokens)]
        pairs = sorted(zip(words, t_rel.token_scores), key=lambda p: -p[1])
        top = [(w, float(s)) for w, s in pairs[:8]]
        req = ExplainRequest(
            query_text=sess.description, top_tokens=top, tile_image=pixels,
            heatmap_overlay=v_rel.heatmap, candidate_id=cand.id,
            candidate_lat=cand.lat, candidate_lon=cand.lon,
            poi_tags=list(ref.tile.poi_tags),
        )
        resp = self.explainer.explain(req)
        cand.confidence = resp.confidence
        cand.rationale = resp.rationale
        heat_ref = None
        if self.heatmap_dir is not None:
            os.makedirs(self.heatmap_dir, exist_ok=True)
            name = f"{sess.id}_{cand.id}"
            write_pgm(v_rel.heatmap, os.path.join(self.heatmap_dir, f"{name}.pgm"))
            heat_ref = f"/heatmaps/{name}"
        return {
            "heatmap": heat_ref,
            "tokens": [{"token": w, "score": s} for w, s in top],
        }


class LocalizeRequest(BaseModel):
    v: int = API_VERSION
    text: str
    lat: float
    lon: float
    M: int = 100
    K: int = 5
    explain: bool = False


class RefineRequest(BaseModel):
    v: int = API_VERSION
    session_id: str
    extra_text: str = ""


class RerankRequest(BaseModel):
    v: int = API_VERSION
    session_id: str


def create_app(engine: LocalizeEngine) -> FastAPI:
    app = FastAPI(title="textloc")

    def error(status: int, message: str):
        return JSONResponse(
            status_code=status, content={"v": API_VERSION, "error": message}
        )

    @app.get("/healthz")
    def healthz():
        return {"v": API_VERSION, "status": "ok", "modality": engine.modality,
                "references": len(engine.refs)}

    @app.post("/localize")
    def localize(req: LocalizeRequest):
        if abs(req.lat) > MERCATOR_LAT_BOUND or not -180 <= req.lon <= 180:
            return error(400, f"invalid coordinates ({req.lat}, {req.lon})")
        if req.M < 1 or req.K < 1 or req.K > req.M:
            return error(400, f"need 1 <= K <= M, got K={req.K} M={req.M}")
        if not engine.refs:
            return error(503, "no reference index loaded")
        sess = engine._new_session(
            description=req.text, modality=engine.modality,
            center=(req.lat, req.lon), M=req.M, K=req.K, explain=req.explain,
            history=[req.text],
        )
        try:
            return engine.run(sess)
        except ContractError as e:
            return error(400, str(e))

    @app.post("/refine")
    def refine(req: RefineRequest):
        sess = engine.get_session(req.session_id)
        if sess is None:
            return error(404, f"unknown session {req.session_id}")
        if req.extra_text:
            sess.description = sess.description + ". " + req.extra_text
            sess.history.append(req.extra_text)
        try:
            return engine.run(sess)
        except ContractError as e:
            return error(400, str(e))

    @app.post("/rerank")
    def rerank(req: RerankRequest):
        sess = engine.get_session(req.session_id)
        if sess is None:
            return error(404, f"unknown session {req.session_id}")
        ranked = sess.last_ranked
        if ranked is None or len(ranked.entries) < RERANK_TOP_N:
            return error(400, "session has no top-5 to re-rank")
        head = ranked.entries[:RERANK_TOP_N]
        if any(c.confidence is None for c in head):
            return error(400, "candidates have no confidences; localize with explain=true")
        forced = confidence_rerank(RankedCandidates(entries=list(head)), force=True)
        sess.last_ranked = RankedCandidates(
            entries=forced.entries + ranked.entries[RERANK_TOP_N:], reranked=True
        )
        return {
            "v": API_VERSION,
            "session_id": sess.id,
            "reranked": True,
            "candidates": [
                {"tile_id": c.id, "lat": c.lat, "lon": c.lon,
                 "similarity": c.similarity, "confidence": c.confidence,
                 "rationale": c.rationale, "combined_score": c.combined_score}
                for c in sess.last_ranked.entries
            ],
        }

    @app.get("/tiles/{tile_id}")
    def tile(tile_id: str):
        pixels = engine.tile_pixels(tile_id)
        if pixels is None:
            return error(404, f"unknown tile {tile_id}")
        return Response(content=ppm_bytes(pixels), media_type="image/x-portable-pixmap")

    @app.get("/heatmaps/{name}")
    def heatmap(name: str):
        if engine.heatmap_dir is None:
            return error(404, "heatmaps not enabled")
        path = os.path.join(engine.heatmap_dir, f"{name}.pgm")
        if not os.path.exists(path) or os.path.dirname(name):
            return error(404, f"unknown heatmap {name}")
        with open(path, "rb") as f:
            return Response(content=f.read(), media_type="image/x-portable-graymap")

    return app
