import type {
  ApiErrorBody,
  PolicyMeta,
  SessionView,
  WhatIfView,
} from "./types.js";

let BASE = "";

/** Point the client at a non-same-origin service (used by tests too). */
export function setApiBase(url: string): void {
  BASE = url.replace(/\/$/, "");
}

export class ApiError extends Error {
  constructor(public status: number, public body: ApiErrorBody) {
    super(body.message ?? `request failed with status ${status}`);
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(`${BASE}${path}`, {
    headers: { "Content-Type": "application/json" },
    ...init,
  });
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    throw new ApiError(resp.status, body as ApiErrorBody);
  }
  return body as T;
}

export const api = {
  health: () => request<{ status: string; version: string }>("/health"),
  policyMeta: () => request<PolicyMeta>("/policy"),
  createSession: (x0: number[]) =>
    request<SessionView>("/sessions", {
      method: "POST",
      body: JSON.stringify({ x0 }),
    }),
  observe: (id: string, test: number, values: number[]) =>
    request<SessionView>(`/sessions/${id}/observe`, {
      method: "POST",
      body: JSON.stringify({ test, values }),
    }),
  whatIf: (id: string) => request<WhatIfView>(`/sessions/${id}/whatif`),
};
