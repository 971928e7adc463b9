/**
 * Pure presentation: turn server responses into candidate cards. Ordering
 * always mirrors the server's list; the badge threshold is fixed at 0.5 to
 * match the engine's re-rank trigger and is deliberately not configurable.
 */

import type { CandidateDto, LocalizeResponse, TokenScore } from "./api.js";

export const BADGE_THRESHOLD = 0.5;

export type Badge = "green" | "amber" | "none";

export interface HighlightSpan {
  token: string;
  /** 1..3 intensity buckets proportional to the token's relevance score */
  intensity: number;
}

export interface CandidateView {
  tileId: string;
  rank: number;
  rankBefore: number | null; // position prior to re-ranking, when shown
  similarity: number;
  confidence: number | null;
  badge: Badge;
  rationale: string;
  heatmapUrl: string | null;
  highlights: HighlightSpan[];
}

export function confidenceBadge(confidence: number | null): Badge {
  if (confidence === null || confidence === undefined) return "none";
  return confidence >= BADGE_THRESHOLD ? "green" : "amber";
}

export function highlightSpans(scores: TokenScore[] | undefined): HighlightSpan[] {
  if (!scores || scores.length === 0) return [];
  const max = Math.max(...scores.map((s) => s.score));
  if (max <= 0) return []; // all-zero relevance: nothing to highlight
  return scores
    .filter((s) => s.score > 0)
    .map((s) => ({
      token: s.token,
      intensity: Math.min(3, Math.max(1, Math.ceil((3 * s.score) / max))),
    }));
}

/**
 * Ranks before re-ranking are recovered by similarity order, which is the
 * order the server used prior to applying the confidence rule.
 */
function ranksBySimilarity(candidates: CandidateDto[]): Map<string, number> {
  const sorted = [...candidates].sort((a, b) => b.similarity - a.similarity);
  return new Map(sorted.map((c, i) => [c.tile_id, i + 1]));
}

export function renderCandidates(response: LocalizeResponse): CandidateView[] {
  const before = response.reranked ? ranksBySimilarity(response.candidates) : null;
  return response.candidates.map((c, i) => ({
    tileId: c.tile_id,
    rank: i + 1,
    rankBefore: before ? (before.get(c.tile_id) ?? null) : null,
    similarity: c.similarity,
    confidence: c.confidence,
    badge: confidenceBadge(c.confidence),
    rationale: c.rationale ?? "",
    heatmapUrl: c.heatmap ?? null,
    highlights: highlightSpans(c.text_token_scores),
  }));
}

const BLOCKS = ["", "░", "▒", "▓"]; // light..dark shade per intensity

export function cardText(view: CandidateView): string {
  const badge =
    view.badge === "green" ? "[OK " : view.badge === "amber" ? "[?? " : "[-- ";
  const conf = view.confidence === null ? " n/a" : view.confidence.toFixed(2);
  const move =
    view.rankBefore !== null && view.rankBefore !== view.rank
      ? ` (was #${view.rankBefore})`
      : "";
  const lines = [
    `#${view.rank}${move} ${view.tileId}  sim ${view.similarity.toFixed(3)}  ${badge}${conf}]`,
  ];
  if (view.highlights.length > 0) {
    lines.push(
      "  " + view.highlights.map((h) => `${BLOCKS[h.intensity]}${h.token}`).join(" "),
    );
  }
  if (view.rationale) lines.push(`  ${view.rationale}`);
  return lines.join("\n");
}
