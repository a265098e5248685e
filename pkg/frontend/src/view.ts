// Thin DOM layer: renders the controller state, wires inputs back into it.
// Rendering is a pure function of the last fetched state.

import { ConsoleState } from "./controller.js";
import { designCard, outcomeControl, scheduleBadge } from "./format.js";
import { SessionController } from "./controller.js";

function el(tag: string, cls?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function render(root: HTMLElement, state: ConsoleState, controller: SessionController): void {
  root.replaceChildren();
  const session = state.session;
  if (!session) {
    const btn = el("button", "primary", "Start experiment") as HTMLButtonElement;
    btn.onclick = () => void controller.create();
    root.append(el("h1", "", "bedloop console"), btn);
    return;
  }

  const header = el("div", "header");
  header.append(
    el("h1", "", `Session ${session.id}`),
    el("div", "badge", `model: ${session.model}`),
    el("div", "badge", `step ${session.step} / ${session.horizon}`),
    el("div", "badge", scheduleBadge(session)),
    el("div", `status status-${session.status}`, session.status),
  );
  root.append(header);

  if (session.status === "refining") {
    const p = session.refining;
    const banner = el("div", "refining-banner");
    banner.append(
      el("strong", "", "Refining the design policy on your data…"),
      el("div", "", p ? `${p.done} / ${p.total} steps` : "starting"),
    );
    const bar = el("div", "progress");
    const fill = el("div", "progress-fill");
    fill.style.width = p && p.total > 0 ? `${(100 * p.done) / p.total}%` : "0%";
    bar.append(fill);
    banner.append(bar);
    root.append(banner);
  } else if (session.status === "complete") {
    root.append(el("h2", "", "Experiment complete"));
    const list = el("ul", "history");
    for (const entry of session.history) {
      list.append(el("li", "", `step ${entry.step}: outcome ${entry.outcome}`));
    }
    const dl = el("button", "primary", "Download history CSV") as HTMLButtonElement;
    dl.onclick = async () => {
      const csv = await controller.downloadHistory();
      const blob = new Blob([csv], { type: "text/csv" });
      const a = document.createElement("a");
      a.href = URL.createObjectURL(blob);
      a.download = `history_${session.id}.csv`;
      a.click();
    };
    root.append(list, dl);
  } else {
    const card = designCard(session);
    const cardBox = el("div", "design-card");
    cardBox.append(el("h2", "", card.title));
    for (const line of card.lines) cardBox.append(el("p", "", line));
    root.append(cardBox);

    const control = outcomeControl(session);
    const controls = el("div", "outcome-controls");
    if (control.kind === "binary") {
      for (const [value, label] of [[0, control.labels[0]], [1, control.labels[1]]] as const) {
        const btn = el("button", "choice", label) as HTMLButtonElement;
        btn.disabled = state.busy;
        btn.onclick = () => void controller.submitOutcome(value);
        controls.append(btn);
      }
    } else if (control.kind === "slider") {
      const slider = el("input") as HTMLInputElement;
      slider.type = "range";
      slider.min = "0";
      slider.max = "1";
      slider.step = "0.001";
      slider.value = "0.5";
      const submit = el("button", "primary", "Submit preference") as HTMLButtonElement;
      submit.disabled = state.busy;
      submit.onclick = () =>
        void controller.submitOutcome(controller.clampOutcome(parseFloat(slider.value)));
      controls.append(slider, submit);
    } else {
      const input = el("input") as HTMLInputElement;
      input.type = "number";
      input.step = "any";
      input.placeholder = session.outcome_support;
      const submit = el("button", "primary", "Submit reading") as HTMLButtonElement;
      submit.disabled = state.busy;
      submit.onclick = () => void controller.submitOutcome(parseFloat(input.value));
      controls.append(input, submit);
    }
    root.append(controls);

    if (state.outcomeError) {
      root.append(el("div", "error", state.outcomeError));
    }

    const refineBtn = el("button", "secondary", "Refine policy now") as HTMLButtonElement;
    refineBtn.disabled = state.busy || state.refineDisabled || session.step === 0;
    if (controller.isRefineScheduled()) refineBtn.classList.add("scheduled");
    refineBtn.onclick = () => void controller.triggerRefine();
    root.append(refineBtn);
  }

  if (state.posterior) {
    const box = el("div", "posterior");
    box.append(
      el("h3", "", "Posterior snapshot"),
      el("div", "badge", `ESS ${state.posterior.ess.toFixed(1)} of ${state.posterior.n_particles}`),
    );
    const table = el("table");
    const head = el("tr");
    for (const h of ["parameter", "mean", "5%", "95%"]) head.append(el("th", "", h));
    table.append(head);
    for (const p of state.posterior.parameters) {
      const tr = el("tr");
      tr.append(
        el("td", "", p.name),
        el("td", "", p.mean.toFixed(3)),
        el("td", "", p.q05.toFixed(3)),
        el("td", "", p.q95.toFixed(3)),
      );
      table.append(tr);
    }
    box.append(table);
    root.append(box);
  }
}
