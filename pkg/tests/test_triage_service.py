import json

import pytest
from fastapi.testclient import TestClient

from trialmatch.criteria_logic import load_structured_trials
from trialmatch.evaluation import feedback_prf, load_feedback_events
from trialmatch.matcher import MatchContext, load_patients, match_trial
from trialmatch.triage_service import PhiGuardMissing, TriageStore, create_app


@pytest.fixture()
def client(service_data_dir, tmp_path):
    # each test gets a fresh feedback log
    log = service_data_dir / "feedback_log.jsonl"
    if log.exists():
        log.unlink()
    app = create_app(service_data_dir, bearer_token="")
    with TestClient(app) as c:
        yield c


def test_refuses_to_start_without_phi_guard(tmp_path):
    (tmp_path / "patients.jsonl").write_text("")
    (tmp_path / "structured.jsonl").write_text("")
    with pytest.raises(PhiGuardMissing):
        TriageStore(tmp_path)


def test_patient_summaries_schema(client):
    body = client.get("/patients").json()
    assert [p["patient_id"] for p in body] == ["P01", "P02", "P03", "P04", "P05"]
    allowed = {"patient_id", "gender", "birth_date", "histology", "stage", "disease_descriptors"}
    for summary in body:
        assert set(summary) == allowed


def test_candidates_ranked_and_traced(client):
    body = client.get("/patients/P01/candidates").json()
    assert len(body) == 10
    assert [c["nct_id"] for c in body[:2]] == ["NCT90000001", "NCT90000010"]
    assert all(c["eligible"] for c in body[:2])
    assert all(not c["eligible"] for c in body[2:])
    first = body[0]
    assert first["brief_title"].startswith("A Phase 2 Study of VRX-111")
    assert first["feedback_label"] is None
    trace = first["clause_traces"][first["matched_clause_index"]]
    assert trace["satisfied"]
    kinds = {c["kind"] for c in trace["conditions"]}
    assert "histology_inc" in kinds and "disease_state" in kinds


def test_candidates_match_library_output(client, service_data_dir):
    body = client.get("/patients/P02/candidates").json()
    patients = {p.patient_id: p for p in load_patients(service_data_dir / "patients.jsonl")}
    trials = {t.nct_id: t for t in load_structured_trials(service_data_dir / "structured.jsonl")}
    ctx = MatchContext()
    for view in body:
        expected = match_trial(trials[view["nct_id"]], patients["P02"], ctx)
        assert view["eligible"] == expected.eligible
        assert view["matched_clause_index"] == expected.matched_clause_index
        assert view["clause_traces"] == [t.to_json_dict() for t in expected.clause_traces]


def test_unknown_patient_404(client):
    assert client.get("/patients/P99/candidates").status_code == 404


def test_no_eligible_trials_patient(client):
    body = client.get("/patients/P05/candidates").json()
    assert all(not c["eligible"] for c in body)
    assert [c["nct_id"] for c in body] == sorted(c["nct_id"] for c in body)


def test_feedback_roundtrip(client, service_data_dir):
    response = client.post("/feedback", json={
        "patient_id": "P01", "nct_id": "NCT90000001", "selected": True})
    assert response.status_code == 201
    echo = response.json()
    assert echo["patient_id"] == "P01" and echo["selected"] is True and echo["timestamp"]
    log = (service_data_dir / "feedback_log.jsonl").read_text().strip().splitlines()
    assert len(log) == 1

    found = [c for c in client.get("/patients/P01/candidates").json()
             if c["nct_id"] == "NCT90000001"][0]
    assert found["feedback_label"] is True


def test_feedback_unknown_ids_rejected(client, service_data_dir):
    before = (service_data_dir / "feedback_log.jsonl").read_text()
    assert client.post("/feedback", json={
        "patient_id": "P01", "nct_id": "NCT99999999", "selected": True}).status_code == 404
    assert client.post("/feedback", json={
        "patient_id": "P99", "nct_id": "NCT90000001", "selected": True}).status_code == 404
    assert (service_data_dir / "feedback_log.jsonl").read_text() == before


def test_feedback_malformed_body_400(client):
    assert client.post("/feedback", json={"patient_id": "P01"}).status_code == 400


def test_latest_event_wins(client):
    client.post("/feedback", json={"patient_id": "P01", "nct_id": "NCT90000001", "selected": True})
    client.post("/feedback", json={"patient_id": "P01", "nct_id": "NCT90000001", "selected": False})
    found = [c for c in client.get("/patients/P01/candidates").json()
             if c["nct_id"] == "NCT90000001"][0]
    assert found["feedback_label"] is False


def test_feedback_durable_across_restart(client, service_data_dir):
    client.post("/feedback", json={"patient_id": "P02", "nct_id": "NCT90000002", "selected": True})
    reopened = TestClient(create_app(service_data_dir, bearer_token=""))
    found = [c for c in reopened.get("/patients/P02/candidates").json()
             if c["nct_id"] == "NCT90000002"][0]
    assert found["feedback_label"] is True


def test_structured_trial_view(client, service_data_dir):
    body = client.get("/trials/NCT90000002/structured").json()
    on_disk = [json.loads(line) for line in
               (service_data_dir / "structured.jsonl").read_text().splitlines()]
    expected = [t for t in on_disk if t["nct_id"] == "NCT90000002"][0]
    assert len(body["clauses"]) == len(expected["clauses"])
    assert len(body["canonical_clauses"]) == len(body["clauses"])
    assert body["provenance"]["backend"] == "baseline"
    assert body["provenance"]["shots"] == 0
    assert body["provenance"]["timestamp"]
    assert client.get("/trials/NCT99999999/structured").status_code == 404


def test_feedback_metrics_empty_log_convention(client):
    body = client.get("/metrics/feedback").json()
    assert body == {"tp": 0, "fp": 0, "fn": 0, "precision": 1.0, "recall": 1.0, "f1": 1.0}


def test_feedback_metrics_increment(client):
    client.post("/feedback", json={"patient_id": "P01", "nct_id": "NCT90000001", "selected": True})
    body = client.get("/metrics/feedback").json()
    assert body["tp"] == 1 and body["fn"] == 0 and body["fp"] == 0


def test_feedback_metrics_agree_with_evaluation_module(client, service_data_dir):
    posts = [
        ("P01", "NCT90000001", True),   # eligible, selected -> tp
        ("P01", "NCT90000010", True),   # eligible, selected -> tp
        ("P04", "NCT90000005", True),   # eligible, selected -> tp
        ("P04", "NCT90000004", False),  # eligible, rejected by a selecting patient -> fp
        ("P03", "NCT90000004", True),   # not eligible, selected -> fn
    ]
    for pid, nct, sel in posts:
        client.post("/feedback", json={"patient_id": pid, "nct_id": nct, "selected": sel})
    served = client.get("/metrics/feedback").json()

    patients = {p.patient_id: p for p in load_patients(service_data_dir / "patients.jsonl")}
    trials = {t.nct_id: t for t in load_structured_trials(service_data_dir / "structured.jsonl")}
    ctx = MatchContext()
    events = load_feedback_events(service_data_dir / "feedback_log.jsonl")
    verdicts = {
        (pid, nct): match_trial(trials[nct], patients[pid], ctx).eligible
        for pid, nct, _ in posts
    }
    assert served == feedback_prf(events, verdicts).to_json_dict()
    assert (served["tp"], served["fp"], served["fn"]) == (3, 1, 1)


def test_reads_are_side_effect_free(client):
    first = client.get("/patients/P03/candidates").json()
    second = client.get("/patients/P03/candidates").json()
    assert first == second


def test_bearer_token_enforced(service_data_dir):
    app = create_app(service_data_dir, bearer_token="sekrit")
    with TestClient(app) as c:
        assert c.get("/patients").status_code == 401
        ok = c.get("/patients", headers={"Authorization": "Bearer sekrit"})
        assert ok.status_code == 200
