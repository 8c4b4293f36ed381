// Payload shapes of the policy service, mirrored exactly. The UI renders
// these values verbatim and never derives policy numbers on its own.

export interface PolicyMeta {
  method: string;
  dims: { p0: number; p1: number; p2: number };
  costs: { c1: number; c2: number };
  outcome_kind: string;
  feature_labels: { x0: string[]; x1: string[]; x2: string[] };
}

export interface Recommendation {
  action: number; // 0 = stop, 1/2 = acquire that test
  action_label: string;
  contrasts: Record<string, number> | null;
  deltas: Record<string, number> | null;
}

export interface HistoryEntry {
  event: string;
  state: string;
  test?: number;
}

export interface SessionView {
  id: string;
  state: string;
  risk: number;
  terminal: boolean;
  recommendation: Recommendation | null;
  history: HistoryEntry[];
}

export interface WhatIfRow {
  action: string; // "stop" | "test1" | "test2"
  contrast: number | null;
  cost_delta: number;
}

export interface WhatIfView {
  state: string;
  actions: WhatIfRow[];
}

export interface ApiErrorBody {
  code?: string;
  message?: string;
  field?: string;
}
