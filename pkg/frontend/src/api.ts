/**
 * Typed client for the localization service JSON API. All numbers shown in
 * the console come straight from these response fields; the client never
 * re-scores anything.
 */

export const API_VERSION = 1;

export interface TokenScore {
  token: string;
  score: number;
}

export interface CandidateDto {
  tile_id: string;
  lat: number;
  lon: number;
  similarity: number;
  confidence: number | null;
  rationale: string | null;
  heatmap?: string | null;
  text_token_scores?: TokenScore[];
  combined_score?: number | null;
}

export interface LocalizeResponse {
  v: number;
  session_id: string;
  modality?: string;
  reranked: boolean;
  candidates: CandidateDto[];
}

export interface ApiError {
  v: number;
  error: string;
}

export interface LocalizeParams {
  text: string;
  lat: number;
  lon: number;
  M?: number;
  K?: number;
  explain?: boolean;
}

export type FetchLike = (
  url: string,
  init: { method: string; headers: Record<string, string>; body?: string },
) => Promise<{ status: number; json(): Promise<unknown> }>;

export class ServiceError extends Error {
  constructor(
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

function assertResponse(body: unknown): LocalizeResponse {
  const r = body as LocalizeResponse;
  if (
    typeof r !== "object" ||
    r === null ||
    typeof r.session_id !== "string" ||
    !Array.isArray(r.candidates)
  ) {
    throw new ServiceError("malformed localize response", 0);
  }
  return r;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike,
  ) {}

  private async post(path: string, payload: object): Promise<LocalizeResponse> {
    const res = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ v: API_VERSION, ...payload }),
    });
    const body = await res.json();
    if (res.status >= 400) {
      const err = body as ApiError;
      throw new ServiceError(err?.error ?? `request failed (${res.status})`, res.status);
    }
    return assertResponse(body);
  }

  localize(params: LocalizeParams): Promise<LocalizeResponse> {
    return this.post("/localize", params);
  }

  refine(sessionId: string, extraText: string): Promise<LocalizeResponse> {
    return this.post("/refine", { session_id: sessionId, extra_text: extraText });
  }

  rerank(sessionId: string): Promise<LocalizeResponse> {
    return this.post("/rerank", { session_id: sessionId });
  }
}
