"""Command-line pipeline: ingest, structure, direct-match, match, eval, report, serve."""

from __future__ import annotations

import json
import pathlib
import sys

import click

from . import evaluation
from .criteria_logic import load_structured_trials, write_structured_trials
from .errors import TrialMatchError
from .extraction import (
    extract_structured,
    llm_direct_match,
    load_lexicon,
    run_extraction_batch,
)
from .llm_gateway import (
    ChatClient,
    CompletionConfig,
    RateLimiter,
    ReplayTransport,
    TranscriptRecorder,
    transport_from_env,
)
from .matcher import MatchContext, load_patients, match_trial, rank_candidates
from .ontology import load_oncotree, load_pathways
from .trial_ingest import (
    DEFAULT_MAX_LINES,
    IngestFilter,
    is_oncology_treatment_trial,
    load_trial_docs,
    parse_trial_xml,
    with_prepared_criteria,
    write_trial_docs,
)


@click.group()
def main():
    """Structure-then-match pipeline for oncology trial eligibility."""


def _dump_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="Trial XML file or directory of XML files.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Output TrialDoc JSONL.")
@click.option("--max-lines", default=DEFAULT_MAX_LINES, show_default=True)
@click.option("--filter-config", type=click.Path(exists=True),
              help="JSON with primary_purpose/study_type/disease_keywords.")
@click.option("--no-filter", is_flag=True, help="Keep every parseable trial.")
def ingest(in_path, out_path, max_lines, filter_config, no_filter):
    """Parse registry XML, filter to oncology treatment trials, prepare criteria."""
    base = pathlib.Path(in_path)
    files = sorted(base.glob("*.xml")) if base.is_dir() else [base]
    if filter_config:
        with open(filter_config, encoding="utf-8") as fh:
            filt = IngestFilter.from_config(json.load(fh))
    else:
        filt = IngestFilter()

    kept, skipped, failed = [], 0, 0
    for path in files:
        try:
            doc = parse_trial_xml(path.read_bytes())
        except TrialMatchError as exc:
            failed += 1
            click.echo(f"skipping {path.name}: {exc}", err=True)
            continue
        if not no_filter and not is_oncology_treatment_trial(doc, filt):
            skipped += 1
            continue
        kept.append(with_prepared_criteria(doc, max_lines=max_lines))
    kept.sort(key=lambda d: d.nct_id)
    write_trial_docs(out_path, kept)
    click.echo(f"ingested {len(kept)} trials ({skipped} filtered out, {failed} unparseable)")


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def _build_client(model, endpoint, context_limit, max_output_tokens, record, replay,
                  rate_per_minute) -> ChatClient:
    config = CompletionConfig(
        model_name=model, endpoint=endpoint,
        context_token_limit=context_limit, max_output_tokens=max_output_tokens,
    )
    transport = ReplayTransport(replay) if replay else transport_from_env(config)
    recorder = TranscriptRecorder(record) if record else None
    limiter = None if replay else RateLimiter(rate_per_minute)
    return ChatClient(transport, config, recorder=recorder, rate_limiter=limiter)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--backend", type=click.Choice(["llm", "baseline"]), default="baseline",
              show_default=True)
@click.option("--shots", type=click.Choice(["0", "3"]), default="0", show_default=True)
@click.option("--record", type=click.Path(), help="Record transcripts to this JSONL.")
@click.option("--replay", type=click.Path(exists=True), help="Replay transcripts (offline).")
@click.option("--model", default="gpt-4", show_default=True)
@click.option("--endpoint", default="", help="Chat-completions URL (or env).")
@click.option("--context-limit", default=8192, show_default=True)
@click.option("--max-output-tokens", default=1024, show_default=True)
@click.option("--rate-per-minute", default=60.0, show_default=True)
@click.option("--oncotree", type=click.Path(exists=True), help="Hierarchy for the baseline lexicon.")
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True))
@click.option("--parallelism", default=4, show_default=True)
def structure(in_path, out_path, backend, shots, record, replay, model, endpoint,
              context_limit, max_output_tokens, rate_per_minute, oncotree,
              lexicon_path, parallelism):
    """Turn TrialDoc JSONL into StructuredTrial JSONL via a backend."""
    trials = load_trial_docs(in_path)
    client = None
    lexicon = None
    if backend == "llm":
        client = _build_client(model, endpoint, context_limit, max_output_tokens,
                               record, replay, rate_per_minute)
    else:
        tree = load_oncotree(oncotree) if oncotree else load_oncotree()
        lexicon = load_lexicon(lexicon_path, tree=tree)
    results, jobs = run_extraction_batch(
        trials, backend=backend, shots=int(shots), client=client,
        lexicon=lexicon, parallelism=parallelism,
    )
    write_structured_trials(out_path, results)
    failures = [j for j in jobs if j.status == "failed"]
    click.echo(f"structured {len(results)}/{len(jobs)} trials ({len(failures)} failed)")
    for job in failures:
        click.echo(f"  {job.trial.nct_id}: {job.failure_reason}", err=True)
    if failures and not results:
        sys.exit(1)


# ---------------------------------------------------------------------------
# direct-match
# ---------------------------------------------------------------------------

@main.command("direct-match")
@click.option("--patient", "patient_path", required=True, type=click.Path(exists=True),
              help="Patient bundle: free text, or JSON rendered to text.")
@click.option("--trial", "nct_id", required=True, help="NCT id present in --trials.")
@click.option("--trials", "trials_path", required=True, type=click.Path(exists=True),
              help="TrialDoc JSONL from `ingest`.")
@click.option("--record", type=click.Path())
@click.option("--replay", type=click.Path(exists=True))
@click.option("--model", default="gpt-4", show_default=True)
@click.option("--endpoint", default="")
@click.option("--context-limit", default=8192, show_default=True)
@click.option("--max-output-tokens", default=1024, show_default=True)
@click.option("--out", "out_path", type=click.Path(), help="Write verdict JSON here instead of stdout.")
def direct_match(patient_path, nct_id, trials_path, record, replay, model, endpoint,
                 context_limit, max_output_tokens, out_path):
    """Ask the backend to reason over one patient against one trial."""
    docs = {d.nct_id: d for d in load_trial_docs(trials_path)}
    if nct_id not in docs:
        raise click.ClickException(f"{nct_id} not present in {trials_path}")
    raw = pathlib.Path(patient_path).read_text(encoding="utf-8")
    if patient_path.endswith(".json"):
        doc = json.loads(raw)
        raw = "\n".join(f"{key}: {json.dumps(value)}" for key, value in doc.items())
    client = _build_client(model, endpoint, context_limit, max_output_tokens,
                           record, replay, rate_per_minute=60.0)
    verdict, narrative = llm_direct_match(raw, docs[nct_id], client)
    payload = {"nct_id": nct_id, "verdict": verdict, "narrative": narrative}
    if out_path:
        _dump_json(out_path, payload)
    else:
        click.echo(json.dumps(payload, indent=2))


# ---------------------------------------------------------------------------
# match
# ---------------------------------------------------------------------------

@main.command()
@click.option("--patients", "patients_path", required=True, type=click.Path(exists=True))
@click.option("--trials", "trials_path", required=True, type=click.Path(exists=True),
              help="StructuredTrial JSONL.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--oncotree", type=click.Path(exists=True))
@click.option("--pathways", "pathways_path", type=click.Path(exists=True))
@click.option("--ignore-exclusions", is_flag=True,
              help="Recall-favoring policy: never evaluate exclusion atoms.")
@click.option("--lenient", is_flag=True,
              help="Skip unresolved inclusion atoms instead of failing the clause.")
@click.option("--traces", is_flag=True, help="Embed clause traces in the output rows.")
def match(patients_path, trials_path, out_path, oncotree, pathways_path,
          ignore_exclusions, lenient, traces):
    """Match every patient against every structured trial."""
    ctx = MatchContext(
        tree=load_oncotree(oncotree) if oncotree else load_oncotree(),
        pathways=load_pathways(pathways_path) if pathways_path else load_pathways(),
        lenient=lenient,
        ignore_exclusions=ignore_exclusions,
    )
    patients = load_patients(patients_path)
    trials = load_structured_trials(trials_path)
    eligible_count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for patient in sorted(patients, key=lambda p: p.patient_id):
            for trial in sorted(trials, key=lambda t: t.nct_id):
                result = match_trial(trial, patient, ctx)
                row = {
                    "patient_id": patient.patient_id,
                    "nct_id": trial.nct_id,
                    "eligible": result.eligible,
                    "matched_clause_index": result.matched_clause_index,
                }
                if traces:
                    row["clause_traces"] = [t.to_json_dict() for t in result.clause_traces]
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
                eligible_count += result.eligible
    click.echo(f"matched {len(patients)} patients x {len(trials)} trials "
               f"({eligible_count} eligible pairs)")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@main.group(name="eval")
def eval_group():
    """Scoring regimes over gold files and matcher outputs."""


def _maybe_normalizer(normalized, oncotree, pathways_path):
    tree = load_oncotree(oncotree) if oncotree else (load_oncotree() if normalized else None)
    pathways = load_pathways(pathways_path) if pathways_path else (load_pathways() if normalized else None)
    return tree, pathways


@eval_group.command()
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--normalized", is_flag=True, help="Compare ontology codes, not strings.")
@click.option("--macro", is_flag=True)
@click.option("--oncotree", type=click.Path(exists=True))
@click.option("--pathways", "pathways_path", type=click.Path(exists=True))
def entities(gold_path, pred_path, out_path, normalized, macro, oncotree, pathways_path):
    """Entity-level P/R/F1 for histology and biomarker atoms."""
    tree, pathways = _maybe_normalizer(normalized, oncotree, pathways_path)
    gold = evaluation.extract_entity_sets(
        load_structured_trials(gold_path), normalized=normalized, tree=tree, pathways=pathways)
    pred = evaluation.extract_entity_sets(
        load_structured_trials(pred_path), normalized=normalized, tree=tree, pathways=pathways)
    scores = evaluation.entity_prf(gold, pred, macro=macro)
    _dump_json(out_path, {
        "regime": "entities",
        "normalized": normalized,
        "scores": {k: m.to_json_dict() for k, m in scores.items()},
    })
    click.echo(f"wrote {out_path}")


@eval_group.command()
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--normalized", is_flag=True)
@click.option("--macro", is_flag=True)
@click.option("--oncotree", type=click.Path(exists=True))
@click.option("--pathways", "pathways_path", type=click.Path(exists=True))
def dnf(gold_path, pred_path, out_path, normalized, macro, oncotree, pathways_path):
    """Disjunction-level P/R/F1 per scope (exact conjunction equality)."""
    tree, pathways = _maybe_normalizer(normalized, oncotree, pathways_path)
    scores = evaluation.dnf_prf(
        load_structured_trials(gold_path, strict=True),
        load_structured_trials(pred_path),
        normalized=normalized, tree=tree, pathways=pathways, macro=macro,
    )
    _dump_json(out_path, {
        "regime": "dnf",
        "normalized": normalized,
        "scores": {k: m.to_json_dict() for k, m in scores.items()},
    })
    click.echo(f"wrote {out_path}")


@eval_group.command()
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True),
              help="Enrollment pairs JSONL.")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True),
              help="Matcher results JSONL.")
@click.option("--out", "out_path", required=True, type=click.Path())
def enrollment(gold_path, pred_path, out_path):
    """Recall over historical patient-trial enrollment pairs."""
    result = evaluation.enrollment_recall(
        evaluation.load_enrollment_pairs(gold_path),
        evaluation.load_match_verdicts(pred_path),
    )
    _dump_json(out_path, {"regime": "enrollment", "scores": {"recall": result.to_json_dict()}})
    click.echo(f"wrote {out_path}")


@eval_group.command()
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True),
              help="Feedback events JSONL.")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True),
              help="Matcher results JSONL.")
@click.option("--out", "out_path", required=True, type=click.Path())
def feedback(gold_path, pred_path, out_path):
    """P/R/F1 of matcher verdicts against reviewer selections."""
    metrics = evaluation.feedback_prf(
        evaluation.load_feedback_events(gold_path),
        evaluation.load_match_verdicts(pred_path),
    )
    _dump_json(out_path, {"regime": "feedback", "scores": {"overall": metrics.to_json_dict()}})
    click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@main.command()
@click.option("--add", "fragments", type=(str, click.Path(exists=True)), multiple=True,
              required=True, help="SYSTEM FRAGMENT.json pair; repeatable.")
@click.option("--out-json", required=True, type=click.Path())
@click.option("--out-text", type=click.Path())
def report(fragments, out_json, out_text):
    """Merge eval fragments into the multi-system comparison artifact."""
    results: dict[str, dict] = {}
    for system, path in fragments:
        with open(path, encoding="utf-8") as fh:
            fragment = json.load(fh)
        regime = fragment["regime"]
        for key, score in fragment["scores"].items():
            label = regime if key in ("overall", "recall") else f"{regime}/{key}"
            results.setdefault(system, {})[label] = score
    artifact = evaluation.report(results)
    _dump_json(out_json, artifact["json"])
    if out_text:
        with open(out_text, "w", encoding="utf-8") as fh:
            fh.write(artifact["text"] + "\n")
    click.echo(artifact["text"])


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(data_dir, host, port):
    """Run the triage HTTP service over a prepared data directory."""
    import uvicorn

    from .triage_service import create_app

    uvicorn.run(create_app(data_dir), host=host, port=port)


if __name__ == "__main__":
    main()
