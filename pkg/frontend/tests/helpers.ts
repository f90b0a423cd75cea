import type { CandidateView, ClauseTrace, FeedbackAck, TriageClient } from "../src/api.js";

export function makeTrace(overrides: Partial<ClauseTrace> = {}): ClauseTrace {
  return {
    clause: {
      cohort: "",
      disease_state: "metastatic",
      histology_inclusion: "colorectal cancer",
      biomarker_inclusion: ["KRAS G12C"],
      histology_exclusion: ["primary CNS tumor"],
      biomarker_exclusion: [],
    },
    conditions: [
      {
        atom: "colorectal cancer",
        kind: "histology_inc",
        satisfied: true,
        reason: "COADREAD subsumes patient histology COAD",
        unresolved: false,
      },
      {
        atom: "KRAS G12C",
        kind: "biomarker_inc",
        satisfied: true,
        reason: "covers patient biomarker 'KRAS G12C'",
        unresolved: false,
      },
      {
        atom: "primary CNS tumor",
        kind: "histology_exc",
        satisfied: false,
        reason: "patient histology COAD not under BRAIN",
        unresolved: false,
      },
    ],
    satisfied: true,
    ...overrides,
  };
}

export function makeCandidate(overrides: Partial<CandidateView> = {}): CandidateView {
  return {
    nct_id: "NCT90000001",
    brief_title: "A trial",
    official_title: "A longer trial title",
    eligible: true,
    matched_clause_index: 0,
    score: 3,
    clause_traces: [makeTrace()],
    feedback_label: null,
    ...overrides,
  };
}

export interface MockClientOptions {
  candidates?: CandidateView[];
  failFeedback?: boolean;
  feedbackDelayMs?: number;
}

export function makeMockClient(options: MockClientOptions = {}): {
  client: TriageClient;
  feedbackCalls: Array<{ patientId: string; nctId: string; selected: boolean }>;
} {
  const feedbackCalls: Array<{ patientId: string; nctId: string; selected: boolean }> = [];
  const client: TriageClient = {
    getPatients: async () => [
      {
        patient_id: "P01",
        gender: "male",
        birth_date: "1958-03-14",
        histology: "COAD",
        stage: "IV",
        disease_descriptors: ["metastatic"],
      },
    ],
    getCandidates: async () => options.candidates ?? [makeCandidate()],
    postFeedback: async (patientId, nctId, selected) => {
      feedbackCalls.push({ patientId, nctId, selected });
      if (options.feedbackDelayMs) {
        await new Promise((resolve) => setTimeout(resolve, options.feedbackDelayMs));
      }
      if (options.failFeedback) {
        throw new Error("server rejected the feedback");
      }
      const ack: FeedbackAck = {
        patient_id: patientId,
        nct_id: nctId,
        selected,
        timestamp: "2025-06-01T00:00:00Z",
      };
      return ack;
    },
    getFeedbackMetrics: async () => ({
      tp: 0,
      fp: 0,
      fn: 0,
      precision: 1,
      recall: 1,
      f1: 1,
    }),
  };
  return { client, feedbackCalls };
}
