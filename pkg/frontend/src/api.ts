/**
 * Typed client for the review service HTTP API.
 *
 * Endpoints consumed (and nothing else):
 *   GET  /runs/{id}/pending
 *   GET  /runs/{id}/status
 *   GET  /images/{image_id}        (URL construction only; the <img> loads it)
 *   POST /runs/{id}/reviews        {image_id, decision, explanation?, nonce}
 *   POST /runs/{id}/advance
 *
 * Errors come back as {code, message}; they surface as ApiError. Transport
 * failures surface as NetworkError so callers can distinguish "the server
 * said no" from "the answer never arrived" (the latter is retryable with
 * the same nonce).
 */

export type DecisionKind = "accept" | "edit" | "reject";

export interface PendingItem {
  image_id: string;
  proposed_label: string;
  proposed_explanation: string;
  ground_truth_label: string;
  round: number;
}

export interface RunStatus {
  run_id: string;
  round: number;
  round_cap: number;
  pending: number;
  active_remaining: number;
  promoted: number;
  total_images: number;
  finalized: boolean;
  effective_size?: number;
  residual?: string[];
}

export interface SubmitResponse {
  image_id: string;
  decision: DecisionKind;
  remaining_pending: number;
  round_complete: boolean;
  promoted: number;
  replayed: boolean;
}

export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
    public body: Record<string, unknown> = {},
  ) {
    super(message);
  }
}

export class NetworkError extends Error {}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ReviewApi {
  constructor(
    private baseUrl: string = "",
    private token: string | null = null,
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  imageUrl(imageId: string): string {
    return `${this.baseUrl}/images/${encodeURIComponent(imageId)}`;
  }

  private headers(json: boolean): Record<string, string> {
    const headers: Record<string, string> = {};
    if (json) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`, {
        method,
        headers: this.headers(body !== undefined),
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (error) {
      throw new NetworkError(error instanceof Error ? error.message : String(error));
    }
    let payload: Record<string, unknown>;
    try {
      payload = (await response.json()) as Record<string, unknown>;
    } catch {
      throw new ApiError("bad_response", "response was not JSON", response.status);
    }
    if (!response.ok) {
      throw new ApiError(
        typeof payload.code === "string" ? payload.code : "error",
        typeof payload.message === "string" ? payload.message : response.statusText,
        response.status,
        payload,
      );
    }
    return payload as T;
  }

  async listPending(runId: string): Promise<PendingItem[]> {
    const body = await this.request<{ pending: PendingItem[] }>(
      "GET",
      `/runs/${encodeURIComponent(runId)}/pending`,
    );
    return body.pending;
  }

  getStatus(runId: string): Promise<RunStatus> {
    return this.request<RunStatus>("GET", `/runs/${encodeURIComponent(runId)}/status`);
  }

  submitReview(
    runId: string,
    review: { image_id: string; decision: DecisionKind; explanation?: string; nonce: string },
  ): Promise<SubmitResponse> {
    return this.request<SubmitResponse>(
      "POST",
      `/runs/${encodeURIComponent(runId)}/reviews`,
      review,
    );
  }

  advance(runId: string): Promise<RunStatus> {
    return this.request<RunStatus>("POST", `/runs/${encodeURIComponent(runId)}/advance`);
  }
}
