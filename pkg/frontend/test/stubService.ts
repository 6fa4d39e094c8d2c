/**
 * In-memory stand-in for the review service with the same semantics the
 * real one guarantees: nonce-idempotent submissions, Conflict on
 * re-decisions, 1-3 sentence edit validation, pending/advance flow.
 */

import { DecisionKind, PendingItem, RunStatus } from "../src/api.js";
import { countSentences } from "../src/model.js";

interface StubAnimal {
  imageId: string;
  label: string;
}

export class StubService {
  runId = "run1";
  round = 1;
  roundCap = 5;
  promoted: number;
  pending: PendingItem[] = [];
  active: StubAnimal[];
  finalized = false;
  nonceReplies = new Map<string, Record<string, unknown>>();
  decided = new Map<string, string>(); // image_id -> nonce
  submitNonces: Array<{ imageId: string; nonce: string }> = [];
  promotions: string[] = [];
  /** drop the next review POST before it reaches the service */
  failNextSubmit = false;
  /** apply the next review POST, then lose the response */
  dropResponseNextSubmit = false;
  /** simulate the service being unreachable */
  failAllRequests = false;
  totalImages: number;

  constructor(images: StubAnimal[], initialPromoted = 2) {
    this.active = [...images];
    this.promoted = initialPromoted;
    this.totalImages = initialPromoted + images.length;
    this.populatePending();
  }

  populatePending(): void {
    this.pending = this.active.map((a) => ({
      image_id: a.imageId,
      proposed_label: a.label,
      proposed_explanation: "Model explanation of the visible features.",
      ground_truth_label: a.label,
      round: this.round,
    }));
  }

  status(): RunStatus {
    const status: RunStatus = {
      run_id: this.runId,
      round: this.round,
      round_cap: this.roundCap,
      pending: this.pending.length,
      active_remaining: this.active.length,
      promoted: this.promoted,
      total_images: this.totalImages,
      finalized: this.finalized,
    };
    if (this.finalized) status.effective_size = this.promoted;
    return status;
  }

  private submit(body: {
    image_id: string;
    decision: DecisionKind;
    explanation?: string;
    nonce: string;
  }): { status: number; payload: Record<string, unknown> } {
    this.submitNonces.push({ imageId: body.image_id, nonce: body.nonce });
    const key = `${body.image_id}:${body.nonce}`;
    const replay = this.nonceReplies.get(key);
    if (replay) return { status: 200, payload: replay };
    if (this.decided.has(body.image_id)) {
      return {
        status: 409,
        payload: { code: "conflict", message: `review for ${body.image_id} already decided` },
      };
    }
    const index = this.pending.findIndex((p) => p.image_id === body.image_id);
    if (index < 0) {
      return {
        status: 404,
        payload: { code: "no_such_pending", message: `no pending review ${body.image_id}` },
      };
    }
    if (body.decision === "edit") {
      const n = countSentences(body.explanation ?? "");
      if (n < 1 || n > 3) {
        return {
          status: 400,
          payload: { code: "validation", message: `explanation must be 1 to 3 sentences, got ${n}` },
        };
      }
    }
    this.pending.splice(index, 1);
    this.decided.set(body.image_id, body.nonce);
    if (body.decision !== "reject") {
      this.promoted += 1;
      this.promotions.push(body.image_id);
      this.active = this.active.filter((a) => a.imageId !== body.image_id);
    }
    const payload = {
      image_id: body.image_id,
      decision: body.decision,
      remaining_pending: this.pending.length,
      round_complete: this.pending.length === 0,
      promoted: this.promoted,
      replayed: false,
    };
    this.nonceReplies.set(key, payload);
    return { status: 200, payload };
  }

  private advance(): { status: number; payload: Record<string, unknown> } {
    if (this.pending.length > 0) {
      return {
        status: 409,
        payload: { code: "pending_reviews_exist", message: "reviews still pending" },
      };
    }
    if (this.active.length === 0) {
      this.finalized = true;
      return { status: 200, payload: this.status() as unknown as Record<string, unknown> };
    }
    if (this.round >= this.roundCap) {
      return {
        status: 409,
        payload: {
          code: "round_cap_reached",
          message: "round cap reached",
          residual: this.active.map((a) => a.imageId),
        },
      };
    }
    this.round += 1;
    this.decided.clear();
    this.populatePending();
    return { status: 200, payload: this.status() as unknown as Record<string, unknown> };
  }

  /** fetch-compatible entry point handed to ReviewApi. */
  fetch = async (input: string, init?: RequestInit): Promise<Response> => {
    if (this.failAllRequests) throw new TypeError("fetch failed");
    const method = init?.method ?? "GET";
    const url = new URL(input, "http://stub.local");
    const respond = (status: number, payload: unknown) =>
      new Response(JSON.stringify(payload), {
        status,
        headers: { "Content-Type": "application/json" },
      });

    const pendingMatch = url.pathname.match(/^\/runs\/([^/]+)\/pending$/);
    const statusMatch = url.pathname.match(/^\/runs\/([^/]+)\/status$/);
    const reviewsMatch = url.pathname.match(/^\/runs\/([^/]+)\/reviews$/);
    const advanceMatch = url.pathname.match(/^\/runs\/([^/]+)\/advance$/);
    const guard = (match: RegExpMatchArray | null) =>
      match && match[1] !== this.runId
        ? respond(404, { code: "unknown_run", message: `no run ${match[1]}` })
        : null;

    if (method === "GET" && pendingMatch) {
      return guard(pendingMatch) ?? respond(200, { run_id: this.runId, pending: this.pending });
    }
    if (method === "GET" && statusMatch) {
      return guard(statusMatch) ?? respond(200, this.status());
    }
    if (method === "POST" && reviewsMatch) {
      const guarded = guard(reviewsMatch);
      if (guarded) return guarded;
      if (this.failNextSubmit) {
        this.failNextSubmit = false;
        throw new TypeError("fetch failed");
      }
      const body = JSON.parse(String(init?.body ?? "{}"));
      const { status, payload } = this.submit(body);
      if (this.dropResponseNextSubmit) {
        this.dropResponseNextSubmit = false;
        throw new TypeError("connection reset while reading the response");
      }
      return respond(status, payload);
    }
    if (method === "POST" && advanceMatch) {
      const guarded = guard(advanceMatch);
      if (guarded) return guarded;
      const { status, payload } = this.advance();
      return respond(status, payload);
    }
    return respond(404, { code: "not_found", message: `no route ${url.pathname}` });
  };
}
