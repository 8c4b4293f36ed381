import { ApiError, api } from "./api.js";
import { Store } from "./state.js";
import type { Actions } from "./ui.js";
import { render } from "./ui.js";

// Wires the store, the API client, and the renderer together. The baseline
// form creates a session; each reported result advances it; the what-if
// panel is read-only. Overrides (observing a test other than the one
// recommended) are flagged on the timeline.

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    const field = err.body.field ? ` (${err.body.field})` : "";
    return `${err.body.message ?? "request failed"}${field}`;
  }
  return "Cannot reach the policy service.";
}

export function createApp(root: HTMLElement): Store {
  const store = new Store();

  const actions: Actions = {
    async start(x0: number[]): Promise<void> {
      try {
        const session = await api.createSession(x0);
        const whatif = await api.whatIf(session.id);
        store.set({
          session,
          whatif,
          banner: null,
          timeline: [{ label: `Baseline entered (${session.state})`, state: session.state, override: false }],
        });
      } catch (err) {
        store.set({ banner: describeError(err) });
      }
    },

    async observe(test: number, values: number[]): Promise<void> {
      const current = store.get();
      if (!current.session) return;
      const recommended = current.session.recommendation?.action;
      const override = recommended !== undefined && recommended !== test;
      try {
        const session = await api.observe(current.session.id, test, values);
        const whatif = await api.whatIf(session.id);
        store.set({
          session,
          whatif,
          banner: null,
          timeline: [
            ...current.timeline,
            {
              label: `Observed test ${test} (${session.state})`,
              state: session.state,
              override,
            },
          ],
        });
      } catch (err) {
        store.set({ banner: describeError(err) });
      }
    },

    async refreshWhatIf(): Promise<void> {
      const current = store.get();
      if (!current.session) return;
      try {
        const whatif = await api.whatIf(current.session.id);
        store.set({ whatif, banner: null });
      } catch (err) {
        store.set({ banner: describeError(err) });
      }
    },
  };

  const repaint = () => render(root, store, actions);
  store.subscribe(repaint);
  repaint();

  void api
    .policyMeta()
    .then((meta) => store.set({ meta }))
    .catch((err) => store.set({ banner: describeError(err) }));
  return store;
}
