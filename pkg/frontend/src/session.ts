/**
 * Client-side session state and request serialization. One request per
 * session may be in flight; later submissions queue behind it so refine
 * calls reach the server in submission order.
 */

import type { ApiClient, LocalizeParams, LocalizeResponse } from "./api.js";
import { ServiceError } from "./api.js";
import { renderCandidates, type CandidateView } from "./render.js";

export interface SessionView {
  sessionId: string | null;
  history: string[]; // descriptions in submission order
  modality: string | null;
  candidates: CandidateView[];
  reranked: boolean;
  /** set when the last request failed; previous candidates stay on screen */
  errorBanner: string | null;
}

export function emptySession(): SessionView {
  return {
    sessionId: null,
    history: [],
    modality: null,
    candidates: [],
    reranked: false,
    errorBanner: null,
  };
}

export function canSubmit(view: SessionView, input: string, busy: boolean): boolean {
  return input.trim().length > 0 && !busy;
}

export class SessionController {
  private view: SessionView = emptySession();
  private queue: Promise<unknown> = Promise.resolve();
  private inFlight = 0;

  constructor(private readonly api: ApiClient) {}

  get state(): SessionView {
    return this.view;
  }

  get busy(): boolean {
    return this.inFlight > 0;
  }

  /** Serialize all server calls: each waits for the previous to settle. */
  private enqueue<T>(task: () => Promise<T>): Promise<T> {
    this.inFlight += 1;
    const next = this.queue.then(task);
    this.queue = next.catch(() => undefined);
    return next.finally(() => {
      this.inFlight -= 1;
    });
  }

  private apply(response: LocalizeResponse): SessionView {
    // candidates come only from the server; no client-side re-scoring
    this.view = {
      ...this.view,
      sessionId: response.session_id,
      modality: response.modality ?? this.view.modality,
      candidates: renderCandidates(response),
      reranked: response.reranked,
      errorBanner: null,
    };
    return this.view;
  }

  private fail(e: unknown): never {
    const message = e instanceof ServiceError ? e.message : "request failed";
    this.view = { ...this.view, errorBanner: message };
    throw e;
  }

  localize(params: LocalizeParams): Promise<SessionView> {
    return this.enqueue(async () => {
      try {
        const r = await this.api.localize(params);
        this.view.history = [params.text];
        return this.apply(r);
      } catch (e) {
        this.fail(e);
      }
    });
  }

  refine(extraText: string): Promise<SessionView> {
    return this.enqueue(async () => {
      const sid = this.view.sessionId;
      if (sid === null) throw new ServiceError("no active session", 0);
      try {
        const r = await this.api.refine(sid, extraText);
        this.view.history = [...this.view.history, extraText];
        return this.apply(r);
      } catch (e) {
        this.fail(e);
      }
    });
  }

  rerank(): Promise<SessionView> {
    return this.enqueue(async () => {
      const sid = this.view.sessionId;
      if (sid === null) throw new ServiceError("no active session", 0);
      try {
        return this.apply(await this.api.rerank(sid));
      } catch (e) {
        this.fail(e);
      }
    });
  }
}
