/**
 * DOM layer: renders the queue from the controller and wires inputs.
 * Keyboard shortcuts on the first open card: A accept, E edit, R reject.
 */

import { DecisionKind } from "./api.js";
import { PendingCard, ReviewController, validateEdit } from "./model.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderCard(controller: ReviewController, card: PendingCard): HTMLElement {
  const root = el("article", "card");
  root.dataset.imageId = card.imageId;

  const image = el("img", "card-image");
  image.src = card.imageUrl;
  image.alt = card.imageId;
  root.appendChild(image);

  const side = el("div", "card-side");
  side.appendChild(el("h3", "card-title", card.imageId));
  side.appendChild(
    el(
      "p",
      "card-labels",
      `proposed: ${card.proposedLabel} | ground truth: ${card.groundTruthLabel} | round ${card.round}`,
    ),
  );

  if (card.editing) {
    const editor = el("textarea", "card-editor");
    editor.value = card.editedText;
    editor.rows = 4;
    editor.addEventListener("input", () =>
      controller.setEditText(card.imageId, editor.value),
    );
    side.appendChild(editor);
  } else {
    side.appendChild(el("p", "card-explanation", card.proposedExplanation));
  }
  if (card.error) side.appendChild(el("p", "card-error", card.error));

  const actions = el("div", "card-actions");
  const buttons: Array<[string, () => void, boolean]> = [
    ["Accept (A)", () => void controller.decide(card.imageId, "accept"), card.inFlight],
    [
      card.editing ? "Save edit" : "Edit (E)",
      () => {
        if (!card.editing) controller.toggleEditing(card.imageId);
        else void controller.decide(card.imageId, "edit");
      },
      card.inFlight || (card.editing && validateEdit(card.editedText) !== null),
    ],
    ["Reject (R)", () => void controller.decide(card.imageId, "reject"), card.inFlight],
  ];
  for (const [label, onClick, disabled] of buttons) {
    const button = el("button", "card-button", label);
    button.disabled = disabled;
    button.addEventListener("click", onClick);
    actions.appendChild(button);
  }
  side.appendChild(actions);
  root.appendChild(side);
  return root;
}

export function mountApp(controller: ReviewController, root: HTMLElement): void {
  const render = () => {
    root.replaceChildren();

    const header = el("header", "top");
    header.appendChild(el("h1", undefined, "Review queue"));
    header.appendChild(el("span", "progress", controller.progressLabel()));
    const refreshButton = el("button", "refresh", "Refresh");
    refreshButton.addEventListener("click", () => void controller.refresh());
    header.appendChild(refreshButton);
    root.appendChild(header);

    if (controller.banner) {
      root.appendChild(el("div", "banner", controller.banner));
    }

    const status = controller.status;
    if (status?.finalized) {
      const done = el("section", "finalized");
      done.appendChild(el("h2", undefined, "Run finalized"));
      done.appendChild(
        el(
          "p",
          undefined,
          `effective prompt set: ${status.effective_size ?? status.promoted} pairs`
            + (status.residual?.length ? `; residual: ${status.residual.join(", ")}` : ""),
        ),
      );
      root.appendChild(done);
      return;
    }

    if (controller.cards.length === 0) {
      const empty = el("section", "empty");
      empty.appendChild(el("p", undefined, "No reviews pending."));
      if (controller.canAdvance()) {
        const advance = el("button", "advance", "Advance round");
        advance.addEventListener("click", () => void controller.advanceRound());
        empty.appendChild(advance);
      }
      root.appendChild(empty);
      return;
    }

    const list = el("section", "cards");
    for (const card of controller.cards) list.appendChild(renderCard(controller, card));
    root.appendChild(list);
  };

  controller.subscribe(render);
  render();

  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLTextAreaElement) return;
    const card = controller.cards.find((c) => !c.inFlight);
    if (!card) return;
    const key = event.key.toLowerCase();
    const decisions: Record<string, DecisionKind> = { a: "accept", r: "reject" };
    if (key in decisions) void controller.decide(card.imageId, decisions[key]!);
    else if (key === "e") controller.toggleEditing(card.imageId);
  });
}
