// Session controller: the console's state machine. UI state is always the
// last state fetched from the engine -- mutations re-fetch, never guess.

import { ApiError, EngineClient, SessionState, PosteriorView } from "./api.js";

export interface ConsoleState {
  session: SessionState | null;
  posterior: PosteriorView | null;
  outcomeError: string | null;
  refineDisabled: boolean;
  busy: boolean;
}

export type Listener = (state: ConsoleState) => void;

export class SessionController {
  state: ConsoleState = {
    session: null,
    posterior: null,
    outcomeError: null,
    refineDisabled: false,
    busy: false,
  };
  private listeners: Listener[] = [];
  private pollTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private client: EngineClient,
    private pollMs = 1000,
  ) {}

  subscribe(fn: Listener): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.state);
  }

  private setState(patch: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...patch };
    this.emit();
  }

  async create(seed?: number): Promise<SessionState> {
    this.setState({ busy: true, outcomeError: null });
    const session = await this.client.createSession(seed);
    this.setState({ session, busy: false, refineDisabled: false });
    await this.refreshPosterior();
    return session;
  }

  /** Reconstruct the full view for an existing session (page reload). */
  async load(id: string): Promise<SessionState> {
    const session = await this.client.getSession(id);
    this.setState({ session, outcomeError: null });
    if (session.status === "refining") this.startPolling();
    await this.refreshPosterior();
    return session;
  }

  /** Client-side support enforcement using engine-supplied bounds only. */
  clampOutcome(raw: number): number {
    const bounds = this.state.session?.outcome_bounds;
    if (!bounds) return raw;
    if (bounds.choices) {
      // snap to the nearest allowed choice
      let best = bounds.choices[0];
      for (const c of bounds.choices) {
        if (Math.abs(c - raw) < Math.abs(best - raw)) best = c;
      }
      return best;
    }
    let v = raw;
    if (bounds.lo !== undefined) v = Math.max(bounds.lo, v);
    if (bounds.hi !== undefined) v = Math.min(bounds.hi, v);
    return v;
  }

  async submitOutcome(value: number): Promise<void> {
    const session = this.state.session;
    if (!session) throw new Error("no active session");
    this.setState({ busy: true, outcomeError: null });
    try {
      const next = await this.client.submitOutcome(session.id, value);
      this.setState({ session: next, busy: false });
      await this.refreshPosterior();
    } catch (err) {
      if (err instanceof ApiError && err.status === 422) {
        // invalid outcome: show the engine's support message, do not advance
        this.setState({ outcomeError: err.detail, busy: false });
        return;
      }
      this.setState({ busy: false });
      throw err;
    }
  }

  async triggerRefine(): Promise<void> {
    const session = this.state.session;
    if (!session) throw new Error("no active session");
    this.setState({ busy: true });
    try {
      await this.client.triggerRefine(session.id);
      const refreshed = await this.client.getSession(session.id);
      this.setState({ session: refreshed, busy: false });
      this.startPolling();
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.setState({ refineDisabled: true, busy: false });
        return;
      }
      this.setState({ busy: false });
      throw err;
    }
  }

  /** Poll status once a second while the engine reports "refining". */
  private startPolling(): void {
    const tick = async () => {
      const session = this.state.session;
      if (!session) return;
      const status = await this.client.getStatus(session.id);
      if (status.status === "refining") {
        const updated = { ...session, status: "refining" as const, refining: status.refining };
        this.setState({ session: updated });
        this.pollTimer = setTimeout(tick, this.pollMs);
      } else {
        this.pollTimer = null;
        const refreshed = await this.client.getSession(session.id);
        this.setState({ session: refreshed, refineDisabled: false });
        await this.refreshPosterior();
      }
    };
    if (this.pollTimer === null) this.pollTimer = setTimeout(tick, this.pollMs);
  }

  /** Resolves once refinement has finished and the view is refreshed. */
  async waitForIdle(timeoutMs = 120_000): Promise<SessionState> {
    const t0 = Date.now();
    while (Date.now() - t0 < timeoutMs) {
      const session = this.state.session;
      if (session && session.status !== "refining") return session;
      await new Promise((r) => setTimeout(r, 50));
    }
    throw new Error("refinement did not finish in time");
  }

  async refreshPosterior(): Promise<void> {
    const session = this.state.session;
    if (!session || session.step === 0) {
      this.setState({ posterior: null });
      return;
    }
    try {
      const posterior = await this.client.getPosterior(session.id);
      this.setState({ posterior });
    } catch {
      // posterior view is advisory; leave the last snapshot in place
    }
  }

  isRefineScheduled(): boolean {
    const s = this.state.session;
    return !!s && s.schedule.includes(s.step) && s.status === "awaiting-outcome";
  }

  async downloadHistory(): Promise<string> {
    const session = this.state.session;
    if (!session) throw new Error("no active session");
    return this.client.downloadHistoryCsv(session.id);
  }

  dispose(): void {
    if (this.pollTimer !== null) clearTimeout(this.pollTimer);
    this.pollTimer = null;
  }
}
