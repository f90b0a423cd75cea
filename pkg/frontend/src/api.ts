/**
 * Typed client for the triage service HTTP API.
 *
 * Every eligibility fact displayed by the UI originates from these
 * responses; nothing is re-derived client-side. The only configuration is
 * the service base URL. A fetch implementation can be injected for tests.
 */

export interface PatientSummary {
  patient_id: string;
  gender: string;
  birth_date: string;
  histology: string;
  stage: string;
  disease_descriptors: string[];
}

export interface ConditionResult {
  atom: string;
  kind: string; // histology_inc | biomarker_inc | histology_exc | biomarker_exc | disease_state
  satisfied: boolean;
  reason: string;
  unresolved: boolean;
}

export interface ClauseTrace {
  clause: Record<string, unknown>;
  conditions: ConditionResult[];
  satisfied: boolean;
}

export interface CandidateView {
  nct_id: string;
  brief_title: string;
  official_title: string;
  eligible: boolean;
  matched_clause_index: number | null;
  score: number;
  clause_traces: ClauseTrace[];
  feedback_label: boolean | null;
}

export interface FeedbackAck {
  patient_id: string;
  nct_id: string;
  selected: boolean;
  timestamp: string;
}

export interface FeedbackMetrics {
  tp: number;
  fp: number;
  fn: number;
  precision: number;
  recall: number;
  f1: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Structural surface of the client; tests substitute mocks for it. */
export interface TriageClient {
  getPatients(): Promise<PatientSummary[]>;
  getCandidates(patientId: string): Promise<CandidateView[]>;
  postFeedback(patientId: string, nctId: string, selected: boolean): Promise<FeedbackAck>;
  getFeedbackMetrics(): Promise<FeedbackMetrics>;
}

export class TriageApi implements TriageClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = `HTTP ${response.status}`;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  getPatients(): Promise<PatientSummary[]> {
    return this.request<PatientSummary[]>("/patients");
  }

  getCandidates(patientId: string): Promise<CandidateView[]> {
    return this.request<CandidateView[]>(
      `/patients/${encodeURIComponent(patientId)}/candidates`,
    );
  }

  postFeedback(patientId: string, nctId: string, selected: boolean): Promise<FeedbackAck> {
    return this.request<FeedbackAck>("/feedback", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ patient_id: patientId, nct_id: nctId, selected }),
    });
  }

  getFeedbackMetrics(): Promise<FeedbackMetrics> {
    return this.request<FeedbackMetrics>("/metrics/feedback");
  }
}
