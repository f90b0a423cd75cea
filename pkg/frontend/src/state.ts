/**
 * Queue state with optimistic feedback submission.
 *
 * Rows stay in server order. submitFeedback() flips the label optimistically
 * and marks the row pending; the pending flag clears only on server
 * acknowledgment. On error the previous label is restored and the error is
 * surfaced - no user action is ever dropped silently. A pending row refuses
 * further submissions (double-click guard: exactly one POST in flight per row).
 */

import type { CandidateView, TriageClient } from "./api.js";

export interface CandidateRow extends CandidateView {
  pending: boolean;
}

export type Listener = (state: QueueState) => void;

export class QueueState {
  patientId: string | null = null;
  rows: CandidateRow[] = [];
  error: string | null = null;
  loading = false;

  private listeners: Listener[] = [];

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener(this);
  }

  async load(api: TriageClient, patientId: string): Promise<void> {
    this.loading = true;
    this.error = null;
    this.notify();
    try {
      const candidates = await api.getCandidates(patientId);
      this.patientId = patientId;
      this.rows = candidates.map((c) => ({ ...c, pending: false }));
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
      this.rows = [];
      this.patientId = patientId;
    } finally {
      this.loading = false;
      this.notify();
    }
  }

  row(nctId: string): CandidateRow | undefined {
    return this.rows.find((r) => r.nct_id === nctId);
  }

  /** Returns true when the feedback was acknowledged by the server. */
  async submitFeedback(api: TriageClient, nctId: string, selected: boolean): Promise<boolean> {
    const row = this.row(nctId);
    if (!row || row.pending || this.patientId === null) {
      return false;
    }
    const previous = row.feedback_label;
    row.pending = true;
    row.feedback_label = selected;
    this.error = null;
    this.notify();
    try {
      await api.postFeedback(this.patientId, nctId, selected);
      row.pending = false;
      this.notify();
      return true;
    } catch (err) {
      row.pending = false;
      row.feedback_label = previous;
      this.error = err instanceof Error ? err.message : String(err);
      this.notify();
      return false;
    }
  }
}
