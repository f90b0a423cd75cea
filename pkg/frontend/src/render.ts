/**
 * DOM rendering for the triage queue. Pure view code: every displayed fact
 * comes from the service payloads carried in the state; trace panels echo
 * the service JSON verbatim (atom, kind, satisfied, reason), with exclusion
 * hits highlighted.
 */

import type { ClauseTrace, PatientSummary } from "./api.js";
import type { CandidateRow, QueueState } from "./state.js";

export interface QueueHandlers {
  onFeedback: (nctId: string, selected: boolean) => void;
  onToggleTrace?: (nctId: string) => void;
}

export function renderPatientList(
  container: HTMLElement,
  patients: PatientSummary[],
  onSelect: (patientId: string) => void,
): void {
  container.replaceChildren();
  const list = document.createElement("ul");
  list.className = "patient-list";
  for (const patient of patients) {
    const item = document.createElement("li");
    const button = document.createElement("button");
    button.className = "patient-button";
    button.dataset.patientId = patient.patient_id;
    button.textContent = `${patient.patient_id} — ${patient.histology}${
      patient.stage ? " " + patient.stage : ""
    }`;
    button.addEventListener("click", () => onSelect(patient.patient_id));
    item.appendChild(button);
    list.appendChild(item);
  }
  container.appendChild(list);
}

export function renderErrorBanner(container: HTMLElement, message: string | null): void {
  container.replaceChildren();
  if (!message) return;
  const banner = document.createElement("div");
  banner.className = "error-banner";
  banner.setAttribute("role", "alert");
  banner.textContent = message;
  container.appendChild(banner);
}

export function renderTracePanel(trace: ClauseTrace): HTMLElement {
  const panel = document.createElement("div");
  panel.className = trace.satisfied ? "trace-panel clause-satisfied" : "trace-panel";
  const list = document.createElement("ul");
  list.className = "trace-conditions";
  for (const condition of trace.conditions) {
    const item = document.createElement("li");
    const isExclusion = condition.kind.endsWith("_exc");
    const classes = ["condition"];
    classes.push(condition.satisfied ? "condition-satisfied" : "condition-unsatisfied");
    if (isExclusion && condition.satisfied) classes.push("exclusion-hit");
    if (condition.unresolved) classes.push("condition-unresolved");
    item.className = classes.join(" ");
    item.dataset.kind = condition.kind;
    item.dataset.atom = condition.atom;

    const atom = document.createElement("span");
    atom.className = "condition-atom";
    atom.textContent = condition.atom || "(none)";
    const kind = document.createElement("span");
    kind.className = "condition-kind";
    kind.textContent = condition.kind;
    const reason = document.createElement("span");
    reason.className = "condition-reason";
    reason.textContent = condition.reason;

    item.append(atom, kind, reason);
    list.appendChild(item);
  }
  panel.appendChild(list);
  return panel;
}

function renderCandidateRow(row: CandidateRow, handlers: QueueHandlers): HTMLElement {
  const card = document.createElement("article");
  card.className = row.eligible ? "candidate" : "candidate candidate-ineligible";
  card.dataset.nctId = row.nct_id;

  const header = document.createElement("header");
  const badge = document.createElement("span");
  badge.className = row.eligible ? "badge badge-eligible" : "badge badge-ineligible";
  badge.textContent = row.eligible ? "eligible" : "not eligible";
  const title = document.createElement("span");
  title.className = "candidate-title";
  title.textContent = `${row.nct_id} — ${row.brief_title || "(no title)"}`;
  const score = document.createElement("span");
  score.className = "candidate-score";
  score.textContent = `score ${row.score}`;
  header.append(badge, title, score);

  const label = document.createElement("span");
  label.className = "feedback-label";
  label.textContent =
    row.feedback_label === null ? "unreviewed" : row.feedback_label ? "selected" : "rejected";
  if (row.pending) {
    label.textContent += " (saving…)";
    label.classList.add("pending");
  }

  const actions = document.createElement("div");
  actions.className = "actions";
  const select = document.createElement("button");
  select.className = "select-button";
  select.textContent = "Select";
  select.disabled = row.pending;
  select.addEventListener("click", () => handlers.onFeedback(row.nct_id, true));
  const reject = document.createElement("button");
  reject.className = "reject-button";
  reject.textContent = "Reject";
  reject.disabled = row.pending;
  reject.addEventListener("click", () => handlers.onFeedback(row.nct_id, false));
  actions.append(select, reject, label);

  const traces = document.createElement("details");
  traces.className = "traces";
  const summary = document.createElement("summary");
  summary.textContent = `clause traces (${row.clause_traces.length})`;
  summary.addEventListener("click", () => handlers.onToggleTrace?.(row.nct_id));
  traces.appendChild(summary);
  for (const trace of row.clause_traces) {
    traces.appendChild(renderTracePanel(trace));
  }

  card.append(header, actions, traces);
  return card;
}

export function renderQueue(
  container: HTMLElement,
  state: QueueState,
  handlers: QueueHandlers,
): void {
  container.replaceChildren();
  if (state.loading) {
    const note = document.createElement("p");
    note.className = "loading";
    note.textContent = "loading candidates…";
    container.appendChild(note);
    return;
  }
  // server order is authoritative; no client-side re-sorting
  for (const row of state.rows) {
    container.appendChild(renderCandidateRow(row, handlers));
  }
}
