/**
 * Application bootstrap: a patient list on the left, the selected patient's
 * ranked candidate queue on the right, and an error banner that doubles as
 * the connection-failure notice.
 */

import type { TriageClient } from "./api.js";
import { renderErrorBanner, renderPatientList, renderQueue } from "./render.js";
import { QueueState } from "./state.js";

export interface App {
  state: QueueState;
  api: TriageClient;
  selectPatient: (patientId: string) => Promise<void>;
}

export async function initApp(root: HTMLElement, api: TriageClient): Promise<App> {
  root.replaceChildren();
  const banner = document.createElement("div");
  banner.id = "banner";
  const patients = document.createElement("nav");
  patients.id = "patients";
  const queue = document.createElement("main");
  queue.id = "queue";
  root.append(banner, patients, queue);

  const state = new QueueState();
  const handlers = {
    onFeedback: (nctId: string, selected: boolean) => {
      void state.submitFeedback(api, nctId, selected);
    },
  };
  state.subscribe(() => {
    renderQueue(queue, state, handlers);
    renderErrorBanner(banner, state.error);
  });

  const selectPatient = (patientId: string) => state.load(api, patientId);

  try {
    renderPatientList(patients, await api.getPatients(), (id) => void selectPatient(id));
  } catch (err) {
    renderErrorBanner(banner, `cannot reach triage service: ${
      err instanceof Error ? err.message : String(err)
    }`);
  }

  return { state, api, selectPatient };
}
