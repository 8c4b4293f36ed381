import type { PolicyMeta, SessionView, WhatIfView } from "./types.js";

export interface TimelineEntry {
  label: string;
  state: string;
  override: boolean;
}

export interface AppState {
  meta: PolicyMeta | null;
  session: SessionView | null;
  whatif: WhatIfView | null;
  timeline: TimelineEntry[];
  banner: string | null;
  formError: string | null;
}

export const initialState: AppState = {
  meta: null,
  session: null,
  whatif: null,
  timeline: [],
  banner: null,
  formError: null,
};

type Listener = (state: AppState) => void;

export class Store {
  private state: AppState;
  private listeners: Listener[] = [];

  constructor(state: AppState = initialState) {
    this.state = { ...state };
  }

  get(): AppState {
    return this.state;
  }

  set(patch: Partial<AppState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }
}
