import type { Store } from "./state.js";
import type { WhatIfRow } from "./types.js";

// Rendering only: every number shown comes straight out of an API payload.

export interface Actions {
  start(x0: number[]): Promise<void>;
  observe(test: number, values: number[]): Promise<void>;
  refreshWhatIf(): Promise<void>;
}

const ACTION_LABELS: Record<string, string> = {
  stop: "Stop and predict",
  test1: "Acquire test 1",
  test2: "Acquire test 2",
};

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

function numberInputs(labels: string[], prefix: string): HTMLInputElement[] {
  return labels.map((label) => {
    const input = el("input");
    input.type = "text";
    input.name = `${prefix}-${label}`;
    input.placeholder = label;
    input.setAttribute("data-field", label);
    return input;
  });
}

function parseInputs(inputs: HTMLInputElement[]): number[] | null {
  const values: number[] = [];
  for (const input of inputs) {
    const raw = input.value.trim();
    const parsed = Number(raw);
    if (raw === "" || !Number.isFinite(parsed)) return null;
    values.push(parsed);
  }
  return values;
}

function renderBaselineForm(store: Store, actions: Actions): HTMLElement {
  const state = store.get();
  const card = el("section", "card baseline-form");
  card.appendChild(el("h2", undefined, "Baseline"));
  if (!state.meta) {
    card.appendChild(el("p", "muted", "Loading policy metadata..."));
    return card;
  }
  const form = el("form");
  form.setAttribute("data-testid", "baseline-form");
  const inputs = numberInputs(state.meta.feature_labels.x0, "x0");
  inputs.forEach((i) => form.appendChild(i));
  const submit = el("button", undefined, "Get recommendation");
  submit.type = "submit";
  form.appendChild(submit);
  const error = el("p", "field-error", state.formError ?? "");
  error.setAttribute("data-testid", "form-error");
  form.appendChild(error);
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const values = parseInputs(inputs);
    if (values === null) {
      store.set({ formError: "All baseline fields must be numeric." });
      return;
    }
    store.set({ formError: null });
    void actions.start(values);
  });
  card.appendChild(form);
  return card;
}

function renderRecommendation(store: Store): HTMLElement {
  const { session } = store.get();
  const card = el("section", "card recommendation");
  card.setAttribute("data-testid", "recommendation-card");
  if (!session) {
    card.appendChild(el("p", "muted", "Enter baseline values to begin."));
    return card;
  }
  const badge = el("span", "state-badge", session.state);
  badge.setAttribute("data-testid", "state-badge");
  const heading = el("h2", undefined, "Current assessment ");
  heading.appendChild(badge);
  card.appendChild(heading);

  const risk = el("p", "risk");
  risk.setAttribute("data-testid", "risk");
  risk.textContent = `Predicted risk: ${session.risk}`;
  card.appendChild(risk);

  if (session.terminal || session.recommendation === null) {
    const done = el("p", "terminal-note", "Testing complete - final risk above.");
    done.setAttribute("data-testid", "terminal-note");
    card.appendChild(done);
    return card;
  }
  const rec = session.recommendation;
  const advice = el("p", "advice");
  advice.setAttribute("data-testid", "advice");
  advice.textContent = `Recommendation: ${rec.action_label}`;
  card.appendChild(advice);
  if (rec.contrasts) {
    const list = el("ul", "contrasts");
    list.setAttribute("data-testid", "contrasts");
    for (const [name, value] of Object.entries(rec.contrasts)) {
      list.appendChild(el("li", undefined, `${name}: ${value}`));
    }
    card.appendChild(list);
  }
  return card;
}

function admissibleTests(rows: WhatIfRow[]): number[] {
  return rows
    .filter((row) => row.action.startsWith("test"))
    .map((row) => Number(row.action.replace("test", "")));
}

function renderObservationForm(store: Store, actions: Actions): HTMLElement {
  const { session, meta, whatif } = store.get();
  const card = el("section", "card observation");
  card.appendChild(el("h2", undefined, "Report a result"));
  if (!session || !meta) {
    card.appendChild(el("p", "muted", "No active session."));
    return card;
  }
  if (session.terminal) {
    const note = el("p", "muted", "All tests observed; controls disabled.");
    note.setAttribute("data-testid", "observe-disabled");
    card.appendChild(note);
    return card;
  }
  const tests = whatif ? admissibleTests(whatif.actions) : [];
  for (const test of tests) {
    const form = el("form", "observe-form");
    form.setAttribute("data-testid", `observe-${test}`);
    const labels = test === 1 ? meta.feature_labels.x1 : meta.feature_labels.x2;
    const inputs = numberInputs(labels, `test${test}`);
    inputs.forEach((i) => form.appendChild(i));
    const submit = el("button", undefined, `Record test ${test}`);
    submit.type = "submit";
    form.appendChild(submit);
    const error = el("p", "field-error");
    form.appendChild(error);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const values = parseInputs(inputs);
      if (values === null) {
        error.textContent = "Values must be numeric.";
        return;
      }
      error.textContent = "";
      void actions.observe(test, values);
    });
    card.appendChild(form);
  }
  return card;
}

function renderWhatIf(store: Store, actions: Actions): HTMLElement {
  const { whatif } = store.get();
  const card = el("section", "card whatif");
  card.setAttribute("data-testid", "whatif-panel");
  const heading = el("h2", undefined, "What if?");
  const refresh = el("button", "refresh", "Refresh");
  refresh.type = "button";
  refresh.setAttribute("data-testid", "whatif-refresh");
  refresh.addEventListener("click", () => void actions.refreshWhatIf());
  heading.appendChild(refresh);
  card.appendChild(heading);
  if (!whatif) {
    card.appendChild(el("p", "muted", "Start a session to explore actions."));
    return card;
  }
  if (whatif.actions.length === 0) {
    const empty = el("p", "muted", "No further actions available.");
    empty.setAttribute("data-testid", "whatif-empty");
    card.appendChild(empty);
    return card;
  }
  const table = el("table");
  const head = el("tr");
  for (const title of ["Action", "Expected loss change", "Added cost"]) {
    head.appendChild(el("th", undefined, title));
  }
  table.appendChild(head);
  for (const row of whatif.actions) {
    const tr = el("tr");
    tr.setAttribute("data-action", row.action);
    tr.appendChild(el("td", undefined, ACTION_LABELS[row.action] ?? row.action));
    tr.appendChild(el("td", undefined, row.contrast === null ? "-" : String(row.contrast)));
    tr.appendChild(el("td", undefined, String(row.cost_delta)));
    table.appendChild(tr);
  }
  card.appendChild(table);
  return card;
}

function renderTimeline(store: Store): HTMLElement {
  const { timeline } = store.get();
  const card = el("section", "card timeline");
  card.appendChild(el("h2", undefined, "Decision timeline"));
  const list = el("ol");
  list.setAttribute("data-testid", "timeline");
  for (const entry of timeline) {
    const item = el("li", entry.override ? "override" : undefined);
    item.textContent = entry.override ? `${entry.label} (override)` : entry.label;
    list.appendChild(item);
  }
  card.appendChild(list);
  return card;
}

export function render(root: HTMLElement, store: Store, actions: Actions): void {
  // keep whatever the user already typed across repaints
  const typed = new Map<string, string>();
  root.querySelectorAll("input").forEach((input) => {
    if (input.name) typed.set(input.name, input.value);
  });
  root.innerHTML = "";
  const state = store.get();
  if (state.banner) {
    const banner = el("div", "banner");
    banner.setAttribute("data-testid", "error-banner");
    banner.textContent = state.banner;
    root.appendChild(banner);
  }
  const layout = el("div", "layout");
  const main = el("div", "main-column");
  main.appendChild(renderBaselineForm(store, actions));
  main.appendChild(renderRecommendation(store));
  main.appendChild(renderObservationForm(store, actions));
  main.appendChild(renderTimeline(store));
  const side = el("div", "side-column");
  side.appendChild(renderWhatIf(store, actions));
  layout.appendChild(main);
  layout.appendChild(side);
  root.appendChild(layout);
  root.querySelectorAll("input").forEach((input) => {
    const previous = typed.get(input.name);
    if (previous !== undefined) input.value = previous;
  });
}
