import json

import pytest

from trialmatch.criteria_logic import canonicalize
from trialmatch.errors import EmptyExtraction, LexiconMissing, TransportError
from trialmatch.extraction import (
    ExtractionJob,
    baseline_extract,
    build_trial_prompt,
    extract_structured,
    llm_direct_match,
    load_lexicon,
    parse_match_verdict,
    run_extraction_batch,
    serialize_trial_input,
)
from trialmatch.llm_gateway import ChatClient, CompletionConfig, ReplayTransport, assemble_messages
from trialmatch.trial_ingest import TrialDoc, parse_trial_xml, with_prepared_criteria


@pytest.fixture(scope="module")
def lexicon():
    return load_lexicon()


@pytest.fixture(scope="module")
def dcc_doc(fixtures_dir):
    return with_prepared_criteria(parse_trial_xml((fixtures_dir / "trial_dcc3116.xml").read_bytes()))


def replay_client(fixtures_dir, name) -> ChatClient:
    return ChatClient(ReplayTransport(fixtures_dir / "transcripts" / name), CompletionConfig())


# --- prompt building -----------------------------------------------------------

def test_zero_shot_has_no_demonstrations(dcc_doc):
    assert build_trial_prompt(dcc_doc, shots=0).demonstrations == []


def test_three_shot_first_demo_is_the_bundled_example(dcc_doc):
    bundle = build_trial_prompt(dcc_doc, shots=3)
    assert len(bundle.demonstrations) == 3
    assert "DCC-3116" in bundle.demonstrations[0][0]


def test_shots_validation(dcc_doc):
    with pytest.raises(ValueError):
        build_trial_prompt(dcc_doc, shots=2)
    with pytest.raises(ValueError):
        ExtractionJob(trial=dcc_doc, shots=1)


def test_serialization_matches_golden_snapshot(fixtures_dir, dcc_doc):
    golden = (fixtures_dir / "golden_prompt_3shot.txt").read_text(encoding="utf-8")
    messages = assemble_messages(build_trial_prompt(dcc_doc, shots=3))
    snapshot = "\n".join(f"=== {m.role} ===\n{m.content}" for m in messages)
    assert snapshot == golden


def test_serialization_field_order(dcc_doc):
    text = serialize_trial_input(dcc_doc)
    order = [text.index(tag) for tag in
             ("<brief_title>", "<official_title>", "<brief_summary>", "<condition>",
              "<arm_group>", "<criteria>")]
    assert order == sorted(order)


# --- llm backend via replay -------------------------------------------------------

def test_extract_structured_replay(fixtures_dir, dcc_doc):
    client = replay_client(fixtures_dir, "dcc3116_structuring.jsonl")
    trial = extract_structured(dcc_doc, backend="llm", shots=0, client=client)
    assert trial.nct_id == dcc_doc.nct_id
    assert len(trial.clauses) == 4
    markers = [clause.biomarker_inclusion for clause in trial.clauses[:3]]
    assert markers == [("RAS mutation",), ("NF1 mutation",), ("RAF mutation",)]
    assert all(c.histology_inclusion == "Solid Tumor" for c in trial.clauses[:3])
    assert trial.provenance == {"backend": "llm", "shots": 0}


def test_extract_structured_replay_is_deterministic(fixtures_dir, dcc_doc):
    client = replay_client(fixtures_dir, "dcc3116_structuring.jsonl")
    a = extract_structured(dcc_doc, backend="llm", shots=0, client=client)
    b = extract_structured(dcc_doc, backend="llm", shots=0, client=client)
    assert json.dumps(a.to_json_dict()) == json.dumps(b.to_json_dict())


def test_empty_criteria_rejected(dcc_doc):
    import dataclasses

    empty = dataclasses.replace(dcc_doc, criteria_text="")
    with pytest.raises(EmptyExtraction):
        extract_structured(empty, backend="baseline", lexicon=load_lexicon())


# --- baseline backend ---------------------------------------------------------------

def _doc(criteria: str) -> TrialDoc:
    return TrialDoc(nct_id="NCT90000099", brief_title="t", criteria_text=criteria)


def test_baseline_sections_route_atoms(lexicon):
    doc = _doc(
        "Inclusion: patients with metastatic colorectal cancer confirmed by biopsy. "
        "Exclusion: any primary CNS tumor."
    )
    trial = baseline_extract(doc, lexicon)
    assert len(trial.clauses) == 1
    clause = trial.clauses[0]
    assert clause.histology_inclusion == "colorectal cancer"
    assert any("CNS tumor" in atom for atom in clause.histology_exclusion)
    assert clause.disease_state == "metastatic"


def test_baseline_exclusion_header_case_variants(lexicon):
    doc = _doc("Inclusion Criteria:\n- melanoma\nEXCLUSION CRITERIA:\n- KRAS mutation")
    trial = baseline_extract(doc, lexicon)
    assert trial.clauses[0].biomarker_exclusion == ("KRAS mutation",)


def test_baseline_gene_variant_atom(lexicon):
    doc = _doc("Inclusion Criteria:\n- Advanced non-small cell lung cancer\n- EGFR L858R mutation required")
    trial = baseline_extract(doc, lexicon)
    assert any("EGFR L858R" in a for c in trial.clauses for a in c.biomarker_inclusion)


def test_baseline_alternative_biomarkers_become_clauses(fixtures_dir, lexicon):
    doc = with_prepared_criteria(
        parse_trial_xml((fixtures_dir / "corpus" / "trials" / "NCT90000002.xml").read_bytes())
    )
    trial = baseline_extract(doc, lexicon)
    inclusions = [c.biomarker_inclusion for c in trial.clauses]
    assert (("EGFR exon 19 deletion",) in inclusions) and any("EGFR L858R" in i[0] for i in inclusions if i)
    for clause in trial.clauses:
        assert clause.histology_inclusion  # never emitted without one
        assert any("KRAS mutation" in a for a in clause.biomarker_exclusion)


def test_baseline_no_hits_raises(lexicon):
    with pytest.raises(EmptyExtraction):
        baseline_extract(_doc("Inclusion: healthy volunteers aged 18-65."), lexicon)


def test_baseline_requires_lexicon():
    with pytest.raises(LexiconMissing):
        baseline_extract(_doc("melanoma"), None)


# --- batch orchestration --------------------------------------------------------------

def test_batch_continues_past_failures(fixtures_dir, lexicon):
    docs = [
        with_prepared_criteria(parse_trial_xml(p.read_bytes()))
        for p in sorted((fixtures_dir / "corpus" / "trials").glob("*.xml"))
    ]
    import dataclasses

    docs.append(dataclasses.replace(docs[0], nct_id="NCT90000098", criteria_text="no terms here"))
    results, jobs = run_extraction_batch(docs, backend="baseline", lexicon=lexicon)
    assert len(jobs) == len(docs)
    assert [j.status for j in jobs].count("failed") == 1
    failed = [j for j in jobs if j.status == "failed"][0]
    assert "EmptyExtraction" in failed.failure_reason
    assert len(results) == len(docs) - 1
    assert [t.nct_id for t in results] == sorted(t.nct_id for t in results)


def test_batch_deduplicates_canonically(fixtures_dir, lexicon):
    docs = [
        with_prepared_criteria(parse_trial_xml(p.read_bytes()))
        for p in sorted((fixtures_dir / "corpus" / "trials").glob("*.xml"))
    ]
    results, _ = run_extraction_batch(docs, backend="baseline", lexicon=lexicon)
    for trial in results:
        keys = [canonicalize(c) for c in trial.clauses]
        assert len(keys) == len(set(keys))


# --- direct match -----------------------------------------------------------------------

def test_direct_match_replay(fixtures_dir):
    trial = with_prepared_criteria(
        parse_trial_xml((fixtures_dir / "trial_glioma_zotiraciclib.xml").read_bytes())
    )
    bundle = (fixtures_dir / "patient_bundle_glioma.txt").read_text()
    client = replay_client(fixtures_dir, "direct_match_glioma.jsonl")
    verdict, narrative = llm_direct_match(bundle, trial, client)
    assert verdict == "eligible"
    for expected in ("29 years old", "IDH1 R132H", "Karnofsky"):
        assert expected in narrative


def test_direct_match_empty_criteria_uncertain():
    doc = TrialDoc(nct_id="NCT90000097", criteria_text="  ")
    verdict, narrative = llm_direct_match("patient data", doc, client=None)
    assert verdict == "uncertain"
    assert narrative == ""


def test_verdict_parser():
    assert parse_match_verdict("the patient is NOT eligible") == "not_eligible"
    assert parse_match_verdict("In conclusion, the patient appears to be eligible.") == "eligible"
    assert parse_match_verdict("The data are insufficient to decide.") == "uncertain"
    assert parse_match_verdict("") == "uncertain"
    # the conclusion wins over earlier mentions
    text = "The patient may be eligible on histology.\n\nIn conclusion, the patient is not eligible."
    assert parse_match_verdict(text) == "not_eligible"


def test_replay_never_transmits(fixtures_dir, dcc_doc, monkeypatch):
    import httpx

    def bomb(*args, **kwargs):  # pragma: no cover - must never run
        raise AssertionError("network I/O attempted in replay mode")

    monkeypatch.setattr(httpx, "post", bomb)
    monkeypatch.setattr(httpx, "request", bomb, raising=False)
    client = replay_client(fixtures_dir, "dcc3116_structuring.jsonl")
    trial = extract_structured(dcc_doc, backend="llm", shots=0, client=client)
    assert trial.clauses
