"""Rationale and confidence scoring for retrieved candidates, plus the
confidence re-ranking rule over the top-5 list.

The default explainer is a deterministic offline mock (token-overlap
confidence); an HTTP adapter for a chat-style multimodal service is provided
behind the same interface.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

RERANK_TRIGGER = 0.5
RERANK_TOP_N = 5


@dataclass
class ExplainRequest:
    query_text: str
    top_tokens: list[tuple[str, float]]  # sorted descending by score
    tile_image: np.ndarray | None = None
    heatmap_overlay: np.ndarray | None = None
    candidate_id: str = ""
    candidate_lat: float = 0.0
    candidate_lon: float = 0.0
    poi_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        scores = [s for _, s in self.top_tokens]
        if scores != sorted(scores, reverse=True):
            raise ContractError("top tokens must be sorted descending by score")


@dataclass
class ExplainResponse:
    rationale: str
    confidence: float

    def __post_init__(self):
        if not self.rationale:
            raise ContractError("rationale must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class Candidate:
    id: str
    similarity: float
    lat: float = 0.0
    lon: float = 0.0
    confidence: float | None = None
    rationale: str | None = None
    combined_score: float | None = None


@dataclass
class RankedCandidates:
    entries: list[Candidate]
    reranked: bool = False


def build_explainer_prompt(req: ExplainRequest) -> str:
    """Deterministic three-stage instruction: clues, reasoning, confidence."""
    token_list = ", ".join(f"{tok} ({score:.4f})" for tok, score in req.top_tokens)
    lines = [
        "You are assessing one geo-localization retrieval result.",
        f"Query description: {req.query_text}",
        f"Highlighted query tokens (relevance score): {token_list}",
        f"Candidate tile: {req.candidate_id} at "
        f"({req.candidate_lat:.6f}, {req.candidate_lon:.6f}). "
        "The attached images are the tile and its relevance heatmap overlay.",
        "Step 1: Identify the key clues in the highlighted text tokens and in "
        "the bright regions of the heatmap overlay.",
        "Step 2: Reason about whether the text clues and the highlighted tile "
        "regions describe the same place, and explain why the model retrieved "
        "this candidate.",
        "Step 3: On the final line, output only 'CONFIDENCE: x' where x is a "
        "number in [0, 1] for how convincing the match is.",
    ]
    return "\n".join(lines)


class MockExplainer:
    """Offline deterministic explainer: confidence is the Jaccard overlap
    between the top-relevance token set and the candidate's tag token set."""

    def explain(self, req: ExplainRequest) -> ExplainResponse:
        tokens = {t for t, _ in req.top_tokens}
        tags = set(req.poi_tags)
        union = tokens | tags
        inter = tokens & tags
        confidence = len(inter) / len(union) if union else 0.0
        if inter:
            rationale = (
                "The query highlights "
                + ", ".join(sorted(inter))
                + ", which match features of this tile."
            )
        else:
            rationale = (
                "None of the highlighted query tokens correspond to known "
                "features of this tile."
            )
        return ExplainResponse(rationale=rationale, confidence=confidence)


class ExplainerError(RuntimeError):
    """External explainer failure; carries the raw response when available."""

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class HttpExplainer:
    """Chat-style JSON-over-HTTP adapter. Endpoint and credential come from
    the environment; the prompt and both images go in one request."""

    ENDPOINT_VAR = "TEXTLOC_EXPLAINER_ENDPOINT"
    KEY_VAR = "TEXTLOC_EXPLAINER_KEY"

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get(self.ENDPOINT_VAR)
        self.api_key = api_key or os.environ.get(self.KEY_VAR)
        self.timeout = timeout
        if not self.endpoint:
            raise ExplainerError(
                f"no explainer endpoint configured (set {self.ENDPOINT_VAR})"
            )

    def explain(self, req: ExplainRequest) -> ExplainResponse:
        import base64
        import httpx

        from .corpus import ppm_bytes

        def inline(img):
            if img is None:
                return None
            return base64.b64encode(ppm_bytes(img)).decode()

        payload = {
            "prompt": build_explainer_prompt(req),
            "images": [x for x in (inline(req.tile_image),
                                   inline(req.heatmap_overlay)) if x],
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            r = httpx.post(self.endpoint, json=payload, headers=headers,
                           timeout=self.timeout)
            r.raise_for_status()
            text = r.json().get("text", "")
        except httpx.HTTPError as e:
            raise ExplainerError(f"explainer request failed: {e}") from e
        return ExplainResponse(
            rationale=text or "(empty rationale)",
            confidence=parse_confidence(text),
        )


def parse_confidence(text: str) -> float:
    """Pull the final 'CONFIDENCE: x' line out of a response, clamped."""
    for line in reversed(text.strip().splitlines()):
        line = line.strip()
        if line.upper().startswith("CONFIDENCE:"):
            try:
                value = float(line.split(":", 1)[1].strip())
            except ValueError as e:
                raise ExplainerError(
                    f"unparseable confidence line: {line!r}", raw=text
                ) from e
            return min(max(value, 0.0), 1.0)
    raise ExplainerError("no confidence line in response", raw=text)


def _min_max(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi - lo <= 0:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def confidence_rerank(ranked: RankedCandidates,
                      force: bool = False) -> RankedCandidates:
    """Re-rank the top-5 by summed min-max-normalized similarity and
    confidence, but only when the top-1 confidence falls below 0.5
    (or unconditionally with force)."""
    entries = ranked.entries
    if len(entries) != RERANK_TOP_N:
        raise ContractError(
            f"re-ranking needs exactly {RERANK_TOP_N} candidates, got {len(entries)}"
        )
    if any(c.confidence is None for c in entries):
        raise ContractError("every candidate needs a confidence before re-ranking")
    if not force and entries[0].confidence >= RERANK_TRIGGER:
        return RankedCandidates(entries=list(entries), reranked=False)
    norm_sim = _min_max([c.similarity for c in entries])
    norm_conf = _min_max([c.confidence for c in entries])
    scored = []
    for rank, (cand, ns, nc) in enumerate(zip(entries, norm_sim, norm_conf)):
        scored.append((ns + nc, -rank, cand))
        cand.combined_score = ns + nc
    scored.sort(key=lambda x: (-x[0], -x[1]))
    return RankedCandidates(entries=[c for _, _, c in scored], reranked=True)
