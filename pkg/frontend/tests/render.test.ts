import { describe, expect, it } from "vitest";

import type { LocalizeResponse } from "../src/api.js";
import {
  BADGE_THRESHOLD,
  cardText,
  confidenceBadge,
  highlightSpans,
  renderCandidates,
} from "../src/render.js";

function response(partial: Partial<LocalizeResponse> = {}): LocalizeResponse {
  return {
    v: 1,
    session_id: "sess-1",
    modality: "osm",
    reranked: false,
    candidates: [
      { tile_id: "a", lat: 40.7, lon: -74.0, similarity: 0.9, confidence: 0.8, rationale: "r-a" },
      { tile_id: "b", lat: 40.7, lon: -74.0, similarity: 0.8, confidence: 0.4, rationale: "r-b" },
      { tile_id: "c", lat: 40.7, lon: -74.0, similarity: 0.7, confidence: null, rationale: null },
      { tile_id: "d", lat: 40.7, lon: -74.0, similarity: 0.6, confidence: 0.5, rationale: "" },
      { tile_id: "e", lat: 40.7, lon: -74.0, similarity: 0.5, confidence: 0.2, rationale: "r-e" },
    ],
    ...partial,
  };
}

describe("renderCandidates", () => {
  it("produces one card per candidate in server order", () => {
    const views = renderCandidates(response());
    expect(views).toHaveLength(5);
    expect(views.map((v) => v.tileId)).toEqual(["a", "b", "c", "d", "e"]);
    expect(views.map((v) => v.rank)).toEqual([1, 2, 3, 4, 5]);
  });

  it("single candidate works", () => {
    const r = response();
    r.candidates = r.candidates.slice(0, 1);
    expect(renderCandidates(r)).toHaveLength(1);
  });

  it("shows no before-rank when not reranked", () => {
    for (const v of renderCandidates(response())) {
      expect(v.rankBefore).toBeNull();
    }
  });

  it("recovers before-ranks from similarity when reranked", () => {
    const r = response({ reranked: true });
    // server already swapped: second-highest similarity listed first
    r.candidates = [r.candidates[1], r.candidates[0], ...r.candidates.slice(2)];
    const views = renderCandidates(r);
    expect(views[0].tileId).toBe("b");
    expect(views[0].rankBefore).toBe(2);
    expect(views[1].tileId).toBe("a");
    expect(views[1].rankBefore).toBe(1);
    expect(views[2].rankBefore).toBe(3);
  });

  it("keeps every displayed number equal to a server field", () => {
    const r = response();
    const views = renderCandidates(r);
    views.forEach((v, i) => {
      expect(v.similarity).toBe(r.candidates[i].similarity);
      expect(v.confidence).toBe(r.candidates[i].confidence);
    });
  });
});

describe("confidenceBadge", () => {
  it("is green at exactly the threshold", () => {
    expect(confidenceBadge(BADGE_THRESHOLD)).toBe("green");
  });

  it("flips to amber just below the threshold", () => {
    expect(confidenceBadge(0.499999)).toBe("amber");
    expect(confidenceBadge(0.5)).toBe("green");
  });

  it("handles the extremes and missing values", () => {
    expect(confidenceBadge(1.0)).toBe("green");
    expect(confidenceBadge(0.0)).toBe("amber");
    expect(confidenceBadge(null)).toBe("none");
  });
});

describe("highlightSpans", () => {
  it("returns no spans for all-zero scores", () => {
    expect(
      highlightSpans([
        { token: "a", score: 0 },
        { token: "b", score: 0 },
      ]),
    ).toEqual([]);
  });

  it("returns no spans for missing scores", () => {
    expect(highlightSpans(undefined)).toEqual([]);
    expect(highlightSpans([])).toEqual([]);
  });

  it("scales intensity with score", () => {
    const spans = highlightSpans([
      { token: "big", score: 0.9 },
      { token: "mid", score: 0.45 },
      { token: "small", score: 0.1 },
      { token: "zero", score: 0 },
    ]);
    expect(spans.map((s) => s.token)).toEqual(["big", "mid", "small"]);
    const by = Object.fromEntries(spans.map((s) => [s.token, s.intensity]));
    expect(by.big).toBe(3);
    expect(by.big).toBeGreaterThan(by.small);
    expect(spans.every((s) => s.intensity >= 1 && s.intensity <= 3)).toBe(true);
  });
});

describe("cardText", () => {
  it("marks rank movement after a re-rank", () => {
    const r = response({ reranked: true });
    r.candidates = [r.candidates[1], r.candidates[0], ...r.candidates.slice(2)];
    const text = cardText(renderCandidates(r)[0]);
    expect(text).toContain("#1 (was #2) b");
  });

  it("renders a stable card for a plain candidate", () => {
    const view = renderCandidates(response())[0];
    const text = cardText(view);
    expect(text).toContain("a");
    expect(text).toContain("0.900");
    expect(text).toContain("0.80");
  });
});
