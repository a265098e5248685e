// Typed client for the engine's session API. All numerics come from the
// engine; the console only displays and forwards them.

export interface DesignPayload {
  [label: string]: number;
}

export interface HistoryEntry {
  step: number;
  design: DesignPayload;
  outcome: number;
}

export interface RefiningProgress {
  done: number;
  total: number;
}

export interface OutcomeBounds {
  lo?: number;
  hi?: number;
  choices?: number[];
}

export interface SessionState {
  id: string;
  model: string;
  outcome_kind: string;
  outcome_support: string;
  outcome_bounds: OutcomeBounds | null;
  step: number;
  horizon: number;
  status: "awaiting-outcome" | "refining" | "complete";
  schedule: number[];
  design: DesignPayload | null;
  design_vector: number[] | null;
  design_labels: string[];
  refining: RefiningProgress | null;
  history: HistoryEntry[];
}

export interface StatusView {
  status: string;
  step: number;
  horizon: number;
  schedule: number[];
  refining: RefiningProgress | null;
}

export interface PosteriorParam {
  name: string;
  mean: number;
  q05: number;
  q50: number;
  q95: number;
}

export interface PosteriorView {
  history_len: number;
  ess: number;
  n_particles: number;
  parameters: PosteriorParam[];
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseError(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body: keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class EngineClient {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  /** POST with one retry on network failure; the idempotency key makes the
   * retry safe against double-applying the mutation. */
  private async post<T>(path: string, body: Record<string, unknown>): Promise<T> {
    const payload = JSON.stringify(body);
    const doPost = () =>
      this.fetchFn(`${this.baseUrl}${path}`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: payload,
      });
    let resp: Response;
    try {
      resp = await doPost();
    } catch {
      resp = await doPost();
    }
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  createSession(seed?: number, idempotencyKey?: string): Promise<SessionState> {
    return this.post<SessionState>("/sessions", {
      seed: seed ?? null,
      idempotency_key: idempotencyKey ?? crypto.randomUUID(),
    });
  }

  getSession(id: string): Promise<SessionState> {
    return this.get<SessionState>(`/sessions/${id}`);
  }

  getStatus(id: string): Promise<StatusView> {
    return this.get<StatusView>(`/sessions/${id}/status`);
  }

  submitOutcome(id: string, value: number, idempotencyKey?: string): Promise<SessionState> {
    return this.post<SessionState>(`/sessions/${id}/outcome`, {
      value,
      idempotency_key: idempotencyKey ?? crypto.randomUUID(),
    });
  }

  triggerRefine(id: string, budget?: number): Promise<{ status: string }> {
    return this.post(`/sessions/${id}/refine`, {
      budget: budget ?? null,
      idempotency_key: crypto.randomUUID(),
    });
  }

  getPosterior(id: string): Promise<PosteriorView> {
    return this.get<PosteriorView>(`/sessions/${id}/posterior`);
  }

  async downloadHistoryCsv(id: string): Promise<string> {
    const resp = await this.fetchFn(`${this.baseUrl}/sessions/${id}/history?format=csv`);
    if (!resp.ok) await parseError(resp);
    return await resp.text();
  }
}
