// Per-model display templates: turn the engine's labeled design payload into
// the card a participant should see. Display formatting only -- no model math.

import { DesignPayload, SessionState } from "./api.js";

export interface DesignCard {
  title: string;
  lines: string[];
}

function fmt(v: number, digits = 2): string {
  return Number.isFinite(v) ? v.toFixed(digits) : String(v);
}

export function designCard(session: SessionState): DesignCard {
  const d = session.design;
  if (!d) return { title: "No design pending", lines: [] };
  switch (session.model) {
    case "discounting":
      return {
        title: `Question ${session.step + 1} of ${session.horizon}`,
        lines: [
          `Would you prefer £${fmt(d["reward_today"])} today`,
          `or £100 in ${fmt(d["delay_days"], 1)} days?`,
        ],
      };
    case "ces":
      return {
        title: `Comparison ${session.step + 1} of ${session.horizon}`,
        lines: [
          `Basket A: ${fmt(d["basket_a_1"], 1)}, ${fmt(d["basket_a_2"], 1)}, ${fmt(d["basket_a_3"], 1)}`,
          `Basket B: ${fmt(d["basket_b_1"], 1)}, ${fmt(d["basket_b_2"], 1)}, ${fmt(d["basket_b_3"], 1)}`,
          "Slide toward the basket you prefer.",
        ],
      };
    case "location":
      return {
        title: `Probe ${session.step + 1} of ${session.horizon}`,
        lines: [
          `Measure at (${Object.values(d).map((v) => fmt(v)).join(", ")})`,
          "Enter the observed log-intensity.",
        ],
      };
    default:
      return {
        title: `Step ${session.step + 1} of ${session.horizon}`,
        lines: Object.entries(d).map(([k, v]) => `${k}: ${fmt(v, 4)}`),
      };
  }
}

export type OutcomeControl =
  | { kind: "binary"; labels: [string, string] }
  | { kind: "slider"; lo: number; hi: number }
  | { kind: "numeric" };

export function outcomeControl(session: SessionState): OutcomeControl {
  if (session.outcome_kind === "binary-choice") {
    if (session.model === "discounting") {
      return { kind: "binary", labels: ["Take it today", "Wait for £100"] };
    }
    return { kind: "binary", labels: ["0", "1"] };
  }
  if (session.outcome_kind === "censored-slider") {
    const b = session.outcome_bounds ?? {};
    return { kind: "slider", lo: b.lo ?? 0, hi: b.hi ?? 1 };
  }
  return { kind: "numeric" };
}

export function scheduleBadge(session: SessionState): string {
  if (!session.schedule.length) return "no scheduled refinements";
  return `refinement scheduled after step${session.schedule.length > 1 ? "s" : ""} ${session.schedule.join(", ")}`;
}
