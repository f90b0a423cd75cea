"""HTTP backend for human-in-the-loop triage.

Reads an immutable data directory (patients, structured trials, optional raw
trial docs and ontology overrides), matches lazily with content-hash cache
invalidation, serves ranked candidates with clause-level traces, and records
reviewer feedback to an append-only JSONL log (persisted before the 201
acknowledgment). The current label for a (patient, trial) pair is the latest
event.

The service refuses to start unless the data directory contains a PHI_GUARD
marker file: an explicit operator acknowledgment that the directory holds
synthetic or properly governed data. Structuring is CLI-only; the single
write endpoint is feedback capture.

CandidateView fields are a repo-defined superset of the matcher output:
titles, rank score, matched clause index, full traces, and feedback label.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .criteria_logic import StructuredTrial, canonicalize, load_structured_trials
from .errors import TrialMatchError
from .evaluation import FeedbackEvent, feedback_prf
from .matcher import (
    CandidateList,
    MatchContext,
    MatchResult,
    PatientRecord,
    load_patients,
    match_trial,
    rank_candidates,
)
from .ontology import load_oncotree, load_pathways
from .trial_ingest import TrialDoc, load_trial_docs

PHI_GUARD_FILENAME = "PHI_GUARD"
ENV_SERVICE_TOKEN = "TRIALMATCH_SERVICE_TOKEN"
ENV_UI_ORIGIN = "TRIALMATCH_UI_ORIGIN"


class PhiGuardMissing(TrialMatchError):
    """Data directory lacks the PHI_GUARD acknowledgment marker."""


@dataclass
class _Snapshot:
    content_hash: str
    patients: dict[str, PatientRecord]
    trials: dict[str, StructuredTrial]
    docs: dict[str, TrialDoc]
    structured_mtime: str


class TriageStore:
    """Immutable inputs + append-only feedback log + lazy candidate cache."""

    def __init__(self, data_dir, ctx: MatchContext | None = None):
        self.data_dir = Path(data_dir)
        if not (self.data_dir / PHI_GUARD_FILENAME).exists():
            raise PhiGuardMissing(
                f"refusing to start: create {PHI_GUARD_FILENAME} in {self.data_dir} "
                "to acknowledge the data is synthetic or de-identified"
            )
        if ctx is not None:
            self.ctx = ctx
        else:
            oncotree = self.data_dir / "oncotree.json"
            pathways = self.data_dir / "pathways.json"
            self.ctx = MatchContext(
                tree=load_oncotree(oncotree if oncotree.exists() else None),
                pathways=load_pathways(pathways if pathways.exists() else None),
            )
        self.feedback_path = self.data_dir / "feedback_log.jsonl"
        self.feedback_path.touch(exist_ok=True)
        self._write_lock = threading.Lock()
        self._cache_lock = threading.Lock()
        self._candidate_cache: dict[str, tuple[CandidateList, dict[str, MatchResult]]] = {}
        self._snapshot = self._load_snapshot()

    # -- input loading -------------------------------------------------------

    def _input_paths(self) -> list[Path]:
        return [self.data_dir / "patients.jsonl", self.data_dir / "structured.jsonl",
                self.data_dir / "trials.jsonl"]

    def _content_hash(self) -> str:
        digest = hashlib.sha256()
        for path in self._input_paths():
            digest.update(path.read_bytes() if path.exists() else b"\x00")
        return digest.hexdigest()

    def _load_snapshot(self) -> _Snapshot:
        patients = {p.patient_id: p for p in load_patients(self.data_dir / "patients.jsonl")}
        trials = {
            t.nct_id: t
            for t in load_structured_trials(self.data_dir / "structured.jsonl")
        }
        docs_path = self.data_dir / "trials.jsonl"
        docs = {d.nct_id: d for d in load_trial_docs(docs_path)} if docs_path.exists() else {}
        mtime = time.strftime(
            "%Y-%m-%dT%H:%M:%SZ",
            time.gmtime((self.data_dir / "structured.jsonl").stat().st_mtime),
        )
        return _Snapshot(
            content_hash=self._content_hash(),
            patients=patients,
            trials=trials,
            docs=docs,
            structured_mtime=mtime,
        )

    def snapshot(self) -> _Snapshot:
        """Reload inputs when their content hash changed; else reuse."""
        with self._cache_lock:
            if self._content_hash() != self._snapshot.content_hash:
                self._snapshot = self._load_snapshot()
                self._candidate_cache.clear()
            return self._snapshot

    # -- matching ---------------------------------------------------------------

    def candidates(self, patient_id: str) -> tuple[CandidateList, dict[str, MatchResult]]:
        snap = self.snapshot()
        patient = snap.patients[patient_id]
        with self._cache_lock:
            cached = self._candidate_cache.get(patient_id)
            if cached is not None:
                return cached
        trials = list(snap.trials.values())
        results = {t.nct_id: match_trial(t, patient, self.ctx) for t in trials}
        ranked = rank_candidates(patient, trials, self.ctx, results=results)
        with self._cache_lock:
            self._candidate_cache[patient_id] = (ranked, results)
        return ranked, results

    # -- feedback ------------------------------------------------------------------

    def feedback_events(self) -> list[FeedbackEvent]:
        events = []
        with open(self.feedback_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    doc = json.loads(line)
                    events.append(FeedbackEvent(
                        doc["patient_id"], doc["nct_id"], bool(doc["selected"]),
                        doc.get("timestamp", ""),
                    ))
        return events

    def feedback_labels(self) -> dict[tuple[str, str], bool]:
        labels: dict[tuple[str, str], bool] = {}
        for event in self.feedback_events():  # file order; later entries win
            labels[(event.patient_id, event.nct_id)] = event.selected
        return labels

    def append_feedback(self, patient_id: str, nct_id: str, selected: bool) -> dict:
        event = {
            "patient_id": patient_id,
            "nct_id": nct_id,
            "selected": selected,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        line = json.dumps(event, ensure_ascii=False) + "\n"
        with self._write_lock:
            with open(self.feedback_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        return event

    def feedback_metrics(self):
        snap = self.snapshot()
        events = self.feedback_events()
        verdicts: dict[tuple[str, str], bool] = {}
        for event in events:
            key = (event.patient_id, event.nct_id)
            if key in verdicts:
                continue
            if event.patient_id in snap.patients and event.nct_id in snap.trials:
                _, results = self.candidates(event.patient_id)
                verdicts[key] = results[event.nct_id].eligible
        return feedback_prf(events, verdicts)


# ---------------------------------------------------------------------------
# FastAPI wiring
# ---------------------------------------------------------------------------

class FeedbackBody(BaseModel):
    patient_id: str
    nct_id: str
    selected: bool


def create_app(data_dir, ctx: MatchContext | None = None, bearer_token: str | None = None) -> FastAPI:
    store = TriageStore(data_dir, ctx=ctx)
    token = bearer_token if bearer_token is not None else os.environ.get(ENV_SERVICE_TOKEN, "")
    app = FastAPI(title="trialmatch triage service")
    app.state.store = store

    origin = os.environ.get(ENV_UI_ORIGIN, "*")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[origin] if origin != "*" else ["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request body"})

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if token and request.headers.get("Authorization") != f"Bearer {token}":
            return JSONResponse(status_code=401, content={"detail": "missing or bad token"})
        return await call_next(request)

    @app.get("/patients")
    def list_patients():
        snap = store.snapshot()
        return [
            {
                "patient_id": p.patient_id,
                "gender": p.gender,
                "birth_date": p.birth_date,
                "histology": p.histology,
                "stage": p.stage,
                "disease_descriptors": sorted(p.disease_descriptors),
            }
            for p in sorted(snap.patients.values(), key=lambda p: p.patient_id)
        ]

    @app.get("/patients/{patient_id}/candidates")
    def patient_candidates(patient_id: str):
        snap = store.snapshot()
        if patient_id not in snap.patients:
            raise HTTPException(status_code=404, detail=f"unknown patient {patient_id}")
        ranked, results = store.candidates(patient_id)
        labels = store.feedback_labels()
        views = []
        for entry in ranked.entries:
            doc = snap.docs.get(entry.nct_id)
            result = results[entry.nct_id]
            views.append({
                "nct_id": entry.nct_id,
                "brief_title": doc.brief_title if doc else "",
                "official_title": doc.official_title if doc else "",
                "eligible": entry.eligible,
                "matched_clause_index": entry.matched_clause_index,
                "score": entry.score,
                "clause_traces": [t.to_json_dict() for t in result.clause_traces],
                "feedback_label": labels.get((patient_id, entry.nct_id)),
            })
        return views

    @app.post("/feedback", status_code=201)
    def post_feedback(body: FeedbackBody):
        snap = store.snapshot()
        if body.patient_id not in snap.patients:
            raise HTTPException(status_code=404, detail=f"unknown patient {body.patient_id}")
        if body.nct_id not in snap.trials:
            raise HTTPException(status_code=404, detail=f"unknown trial {body.nct_id}")
        return store.append_feedback(body.patient_id, body.nct_id, body.selected)

    @app.get("/trials/{nct_id}/structured")
    def structured_trial(nct_id: str):
        snap = store.snapshot()
        if nct_id not in snap.trials:
            raise HTTPException(status_code=404, detail=f"no structured form for {nct_id}")
        trial = snap.trials[nct_id]
        provenance = dict(trial.provenance or {"backend": "unknown", "shots": None})
        provenance.setdefault("timestamp", snap.structured_mtime)
        return {
            "nct_id": trial.nct_id,
            "clauses": [c.to_json_dict() for c in trial.clauses],
            "canonical_clauses": [
                {
                    "disease_state": canon.disease_state,
                    "histology_inclusion": canon.histology_inclusion,
                    "biomarker_inclusion": list(canon.biomarker_inclusion),
                    "histology_exclusion": list(canon.histology_exclusion),
                    "biomarker_exclusion": list(canon.biomarker_exclusion),
                }
                for canon in (canonicalize(c) for c in trial.clauses)
            ],
            "provenance": provenance,
        }

    @app.get("/metrics/feedback")
    def metrics_feedback():
        return store.feedback_metrics().to_json_dict()

    return app
