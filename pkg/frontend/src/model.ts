/**
 * DOM-free review queue state: pending cards, optimistic decisions with
 * revert, idempotent retry nonces, and round progress. The view layer
 * subscribes and re-renders; tests drive this directly against a stub.
 */

import {
  ApiError,
  DecisionKind,
  NetworkError,
  PendingItem,
  ReviewApi,
  RunStatus,
} from "./api.js";

/** Sentence counting by terminal punctuation, matching the service rule. */
export function countSentences(text: string): number {
  const stripped = text.trim();
  if (!stripped) return 0;
  const terminals = [...stripped.matchAll(/[.!?]+(?=\s|$)/g)];
  let count = terminals.length;
  const last = terminals[terminals.length - 1];
  if (!last || (last.index ?? 0) + last[0].length < stripped.length) count += 1;
  return count;
}

/** Null when the edit text is acceptable, else the validation message. */
export function validateEdit(text: string): string | null {
  const sentences = countSentences(text);
  if (sentences === 0) return "explanation must not be empty";
  if (sentences > 3) return `explanation must be 1 to 3 sentences, got ${sentences}`;
  return null;
}

export function makeNonce(): string {
  const rand = Math.random().toString(36).slice(2, 10);
  return `n-${Date.now().toString(36)}-${rand}`;
}

export interface PendingCard {
  imageId: string;
  imageUrl: string;
  proposedLabel: string;
  proposedExplanation: string;
  groundTruthLabel: string;
  round: number;
  /** editable buffer; survives refreshes */
  editedText: string;
  editing: boolean;
  inFlight: boolean;
  /** created on first submit, reused verbatim on retry */
  nonce: string | null;
  error: string | null;
}

export type Listener = () => void;

export class ReviewController {
  cards: PendingCard[] = [];
  status: RunStatus | null = null;
  banner: string | null = null;
  residual: string[] = [];
  private listeners: Listener[] = [];

  constructor(
    private api: ReviewApi,
    readonly runId: string,
  ) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  progressLabel(): string {
    if (!this.status) return "";
    const s = this.status;
    return `round ${s.round}/${s.round_cap}, promoted ${s.promoted}/${s.total_images}`;
  }

  canAdvance(): boolean {
    const s = this.status;
    return (
      !!s && !s.finalized && s.pending === 0 && this.cards.length === 0 &&
      !this.cards.some((c) => c.inFlight)
    );
  }

  /** Re-fetch status and the pending queue; in-progress edits survive. */
  async refresh(): Promise<void> {
    try {
      const [status, pending] = await Promise.all([
        this.api.getStatus(this.runId),
        this.api.listPending(this.runId),
      ]);
      this.status = status;
      const previous = new Map(this.cards.map((c) => [c.imageId, c]));
      this.cards = pending.map((item) => this.toCard(item, previous.get(item.image_id)));
      this.banner = null;
    } catch (error) {
      this.banner = error instanceof NetworkError
        ? "cannot reach the review service"
        : `service error: ${(error as Error).message}`;
    }
    this.notify();
  }

  private toCard(item: PendingItem, previous?: PendingCard): PendingCard {
    return {
      imageId: item.image_id,
      imageUrl: this.api.imageUrl(item.image_id),
      proposedLabel: item.proposed_label,
      proposedExplanation: item.proposed_explanation,
      groundTruthLabel: item.ground_truth_label,
      round: item.round,
      editedText: previous?.editedText ?? item.proposed_explanation,
      editing: previous?.editing ?? false,
      inFlight: previous?.inFlight ?? false,
      nonce: previous?.nonce ?? null,
      error: previous?.error ?? null,
    };
  }

  setEditText(imageId: string, text: string): void {
    const card = this.cards.find((c) => c.imageId === imageId);
    if (!card) return;
    card.editedText = text;
    card.error = validateEdit(text);
    this.notify();
  }

  toggleEditing(imageId: string): void {
    const card = this.cards.find((c) => c.imageId === imageId);
    if (!card || card.inFlight) return;
    card.editing = !card.editing;
    this.notify();
  }

  /**
   * Optimistic decide: the card leaves the queue immediately and the
   * counters move; a transport failure puts it back (same nonce, so the
   * retry cannot double-promote) and a Conflict defers to the server.
   */
  async decide(imageId: string, decision: DecisionKind): Promise<void> {
    const index = this.cards.findIndex((c) => c.imageId === imageId);
    const card = this.cards[index];
    if (!card || card.inFlight) return;

    let explanation: string | undefined;
    if (decision === "edit") {
      const problem = validateEdit(card.editedText);
      if (problem) {
        card.error = problem;
        this.notify();
        return;
      }
      explanation = card.editedText.trim();
    }
    if (!card.nonce) card.nonce = makeNonce();
    card.inFlight = true;
    card.error = null;

    // optimistic removal; snapshot for revert
    const statusBefore = this.status ? { ...this.status } : null;
    this.cards.splice(index, 1);
    if (this.status) {
      this.status.pending = Math.max(0, this.status.pending - 1);
      if (decision !== "reject") this.status.promoted += 1;
      if (decision !== "reject") {
        this.status.active_remaining = Math.max(0, this.status.active_remaining - 1);
      }
    }
    this.notify();

    try {
      const result = await this.api.submitReview(this.runId, {
        image_id: imageId,
        decision,
        explanation,
        nonce: card.nonce,
      });
      card.inFlight = false;
      if (this.status) {
        this.status.pending = result.remaining_pending;
        this.status.promoted = result.promoted;
      }
      this.banner = null;
      this.notify();
    } catch (error) {
      card.inFlight = false;
      if (error instanceof ApiError && error.status === 409) {
        // already decided elsewhere: the server wins
        await this.refresh();
        return;
      }
      // revert the optimistic update; keep the nonce for a retry
      this.status = statusBefore;
      this.cards.splice(Math.min(index, this.cards.length), 0, card);
      if (error instanceof ApiError) {
        card.error = error.message;
      } else {
        this.banner =
          "connection lost before the decision was confirmed; retry sends the same nonce";
      }
      this.notify();
    }
  }

  async advanceRound(): Promise<void> {
    try {
      const status = await this.api.advance(this.runId);
      this.status = status;
      this.banner = null;
      this.residual = [];
      await this.refresh();
    } catch (error) {
      if (error instanceof ApiError && error.code === "round_cap_reached") {
        this.residual = Array.isArray(error.body.residual)
          ? (error.body.residual as string[])
          : [];
        this.banner = `round cap reached; residual images need manual handling: ${this.residual.join(", ")}`;
      } else if (error instanceof ApiError) {
        this.banner = `cannot advance: ${error.message}`;
        await this.refresh();
        return;
      } else {
        this.banner = "cannot reach the review service";
      }
      this.notify();
    }
  }
}
