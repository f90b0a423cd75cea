"""Metric regimes: entity P/R/F1, DNF disjunction P/R/F1, enrollment recall,
feedback P/R/F1, and a multi-system comparison report.

Zero-denominator convention: precision (or recall) is 0 when its denominator
is 0, except that an empty gold set scored against an empty prediction set
yields precision = recall = f1 = 1. Counts are micro-aggregated across
trials by default; macro averaging sits behind a flag.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass

from .criteria_logic import StructuredTrial, canonical_text, canonicalize
from .errors import MissingGold
from .ontology import OncoTree, PathwayMap, biomarker_identity

logger = logging.getLogger(__name__)

ENTITY_CATEGORIES = ("histology", "biomarker")
DNF_SCOPES = ("histology", "biomarker", "histology+biomarker")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    def to_json_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


def compute_metrics(tp: int, fp: int, fn: int) -> Metrics:
    if tp == 0 and fp == 0 and fn == 0:
        # nothing to find and nothing predicted: perfect by convention
        return Metrics(0, 0, 0, 1.0, 1.0, 1.0)
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return Metrics(tp, fp, fn, precision, recall, f1)


def _macro_average(per_trial: list[tuple[int, int, int]]) -> Metrics:
    if not per_trial:
        return compute_metrics(0, 0, 0)
    scored = [compute_metrics(*counts) for counts in per_trial]
    tp = sum(c[0] for c in per_trial)
    fp = sum(c[1] for c in per_trial)
    fn = sum(c[2] for c in per_trial)
    n = len(scored)
    return Metrics(
        tp, fp, fn,
        sum(m.precision for m in scored) / n,
        sum(m.recall for m in scored) / n,
        sum(m.f1 for m in scored) / n,
    )


# ---------------------------------------------------------------------------
# Entity-level P/R/F1
# ---------------------------------------------------------------------------

def extract_entity_sets(
    trials: list[StructuredTrial],
    normalized: bool = False,
    tree: OncoTree | None = None,
    pathways: PathwayMap | None = None,
) -> dict[str, dict[str, set[str]]]:
    """nct_id -> category -> entity key set, pooling inclusion and exclusion atoms.

    Keys are canonical strings by default; with `normalized`, histology
    atoms map to hierarchy codes and biomarkers to parsed identities,
    falling back to the canonical string when unresolvable.
    """

    def histology_key(text: str) -> str:
        if normalized and tree is not None:
            concepts = tree.normalize(text)
            if concepts:
                return concepts[0].code
        return canonical_text(text)

    def biomarker_key(text: str) -> str:
        if normalized:
            return biomarker_identity(text, pathways)
        return canonical_text(text)

    out: dict[str, dict[str, set[str]]] = {}
    for trial in trials:
        histology: set[str] = set()
        biomarker: set[str] = set()
        for clause in trial.clauses:
            if clause.histology_inclusion.strip():
                histology.add(histology_key(clause.histology_inclusion))
            histology.update(histology_key(a) for a in clause.histology_exclusion)
            biomarker.update(biomarker_key(a) for a in clause.biomarker_inclusion)
            biomarker.update(biomarker_key(a) for a in clause.biomarker_exclusion)
        out[trial.nct_id] = {"histology": histology, "biomarker": biomarker}
    return out


def entity_prf(
    gold: dict[str, dict[str, set[str]]],
    pred: dict[str, dict[str, set[str]]],
    macro: bool = False,
) -> dict[str, Metrics]:
    """Micro-averaged entity extraction metrics per category."""
    unknown = set(pred) - set(gold)
    if unknown:
        raise MissingGold(f"predictions for trials absent from gold: {sorted(unknown)}")

    results: dict[str, Metrics] = {}
    for category in ENTITY_CATEGORIES:
        per_trial = []
        for nct_id, gold_sets in gold.items():
            gold_set = gold_sets.get(category, set())
            pred_set = pred.get(nct_id, {}).get(category, set())
            tp = len(gold_set & pred_set)
            per_trial.append((tp, len(pred_set) - tp, len(gold_set) - tp))
        if macro:
            results[category] = _macro_average(per_trial)
        else:
            results[category] = compute_metrics(
                sum(c[0] for c in per_trial),
                sum(c[1] for c in per_trial),
                sum(c[2] for c in per_trial),
            )
    return results


# ---------------------------------------------------------------------------
# DNF disjunction-level P/R/F1
# ---------------------------------------------------------------------------

def _project_clause(clause, scope: str, histology_key, biomarker_key):
    """Hashable projection of a canonical clause onto a scope; None drops it."""
    canon = canonicalize(clause)
    hist_inc = histology_key(canon.histology_inclusion) if canon.histology_inclusion else ""
    hist_exc = tuple(sorted(histology_key(a) for a in canon.histology_exclusion))
    bio_inc = tuple(sorted(biomarker_key(a) for a in canon.biomarker_inclusion))
    bio_exc = tuple(sorted(biomarker_key(a) for a in canon.biomarker_exclusion))
    if scope == "histology":
        key = (hist_inc, hist_exc)
        return key if (hist_inc or hist_exc) else None
    if scope == "biomarker":
        key = (bio_inc, bio_exc)
        return key if (bio_inc or bio_exc) else None
    # combined scope keeps every clause and includes the disease state
    return (canon.disease_state, hist_inc, bio_inc, hist_exc, bio_exc)


def dnf_prf(
    gold: list[StructuredTrial],
    pred: list[StructuredTrial],
    normalized: bool = False,
    tree: OncoTree | None = None,
    pathways: PathwayMap | None = None,
    macro: bool = False,
) -> dict[str, Metrics]:
    """Disjunct-level metrics: a predicted conjunction scores only on exact
    equality with an unmatched gold conjunction (one-to-one matching), per
    scope projection. Duplicate predicted disjuncts are penalized as fp.

    Single-category scopes drop clauses with no content in that category;
    the combined scope keeps every clause and includes the disease state.
    """

    def histology_key(text: str) -> str:
        if normalized and tree is not None:
            concepts = tree.normalize(text)
            if concepts:
                return concepts[0].code
        return canonical_text(text)

    def biomarker_key(text: str) -> str:
        return biomarker_identity(text, pathways) if normalized else canonical_text(text)

    gold_by_id = {t.nct_id: t for t in gold}
    unknown = {t.nct_id for t in pred} - set(gold_by_id)
    if unknown:
        raise MissingGold(f"predictions for trials absent from gold: {sorted(unknown)}")
    pred_by_id = {t.nct_id: t for t in pred}

    results: dict[str, Metrics] = {}
    for scope in DNF_SCOPES:
        per_trial = []
        for nct_id, gold_trial in gold_by_id.items():
            gold_keys = Counter(
                k for c in gold_trial.clauses
                if (k := _project_clause(c, scope, histology_key, biomarker_key)) is not None
            )
            pred_trial = pred_by_id.get(nct_id)
            pred_keys = Counter(
                k for c in (pred_trial.clauses if pred_trial else [])
                if (k := _project_clause(c, scope, histology_key, biomarker_key)) is not None
            )
            tp = sum((gold_keys & pred_keys).values())
            per_trial.append((tp, sum(pred_keys.values()) - tp, sum(gold_keys.values()) - tp))
        if macro:
            results[scope] = _macro_average(per_trial)
        else:
            results[scope] = compute_metrics(
                sum(c[0] for c in per_trial),
                sum(c[1] for c in per_trial),
                sum(c[2] for c in per_trial),
            )
    return results


# ---------------------------------------------------------------------------
# End-to-end regimes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnrollmentPair:
    patient_id: str
    nct_id: str


@dataclass(frozen=True)
class FeedbackEvent:
    patient_id: str
    nct_id: str
    selected: bool
    timestamp: str = ""


def load_enrollment_pairs(path) -> list[EnrollmentPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                pairs.append(EnrollmentPair(doc["patient_id"], doc["nct_id"]))
    return pairs


def load_feedback_events(path) -> list[FeedbackEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                events.append(
                    FeedbackEvent(
                        doc["patient_id"], doc["nct_id"],
                        bool(doc["selected"]), doc.get("timestamp", ""),
                    )
                )
    return events


def load_match_verdicts(path) -> dict[tuple[str, str], bool]:
    """Read matcher output JSONL into {(patient_id, nct_id): eligible}."""
    verdicts: dict[tuple[str, str], bool] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                verdicts[(doc["patient_id"], doc["nct_id"])] = bool(doc["eligible"])
    return verdicts


@dataclass(frozen=True)
class EnrollmentRecall:
    recall: float
    matched: int
    evaluated: int
    skipped: int

    def to_json_dict(self) -> dict:
        return {
            "recall": self.recall, "matched": self.matched,
            "evaluated": self.evaluated, "skipped": self.skipped,
        }


def enrollment_recall(
    pairs: list[EnrollmentPair], verdicts: dict[tuple[str, str], bool]
) -> EnrollmentRecall:
    """Fraction of known enrollments the matcher flags as eligible.

    Pairs with no matcher verdict are skipped with a warning and reported.
    """
    matched = evaluated = skipped = 0
    for pair in pairs:
        key = (pair.patient_id, pair.nct_id)
        if key not in verdicts:
            logger.warning("no matcher verdict for enrollment pair %s", key)
            skipped += 1
            continue
        evaluated += 1
        if verdicts[key]:
            matched += 1
    recall = matched / evaluated if evaluated else 0.0
    return EnrollmentRecall(recall=recall, matched=matched, evaluated=evaluated, skipped=skipped)


def dedupe_feedback(events: list[FeedbackEvent]) -> list[FeedbackEvent]:
    """Latest event per (patient, trial) wins; later file position breaks ties."""
    latest: dict[tuple[str, str], FeedbackEvent] = {}
    for event in events:
        key = (event.patient_id, event.nct_id)
        if key not in latest or event.timestamp >= latest[key].timestamp:
            latest[key] = event
    return list(latest.values())


def feedback_prf(
    events: list[FeedbackEvent], verdicts: dict[tuple[str, str], bool]
) -> Metrics:
    """Reviewer selections as labels versus matcher eligibility as predictions.

    Patients with zero selected trials are excluded entirely (their
    candidates may simply never have been inspected).
    """
    deduped = dedupe_feedback(events)
    selected_patients = {e.patient_id for e in deduped if e.selected}

    tp = fp = fn = 0
    for event in deduped:
        if event.patient_id not in selected_patients:
            continue
        key = (event.patient_id, event.nct_id)
        if key not in verdicts:
            logger.warning("no matcher verdict for feedback event %s", key)
            continue
        predicted = verdicts[key]
        if predicted and event.selected:
            tp += 1
        elif predicted and not event.selected:
            fp += 1
        elif not predicted and event.selected:
            fn += 1
    return compute_metrics(tp, fp, fn)


# ---------------------------------------------------------------------------
# Comparison report
# ---------------------------------------------------------------------------

def _score_as_dict(value) -> dict:
    return value.to_json_dict() if hasattr(value, "to_json_dict") else dict(value)


def report(results: dict[str, dict]) -> dict:
    """Comparison artifact: {"json": machine-readable dict, "text": aligned table}.

    `results` maps system name -> column label -> score, where a score is a
    Metrics, an EnrollmentRecall, or an equivalent plain dict (recall-only
    scores render "-" in the precision/F1 cells). Rows and columns are
    emitted in sorted order so the artifact is byte-deterministic.
    """
    if not results:
        raise ValueError("report needs at least one system's results")
    systems = sorted(results)
    labels = sorted({label for scores in results.values() for label in scores})

    payload = {
        "systems": [
            {
                "system": system,
                "scores": {
                    label: _score_as_dict(results[system][label])
                    for label in labels
                    if label in results[system]
                },
            }
            for system in systems
        ]
    }

    def cell(score: dict | None, key: str) -> str:
        if score is None or key not in score:
            return "-"
        return f"{score[key] * 100:.1f}"

    headers = ["system"]
    for label in labels:
        headers += [f"{label} P", f"{label} R", f"{label} F1"]
    rows = []
    for system in systems:
        row = [system]
        for label in labels:
            raw = results[system].get(label)
            score = _score_as_dict(raw) if raw is not None else None
            row += [cell(score, "precision"), cell(score, "recall"), cell(score, "f1")]
        rows.append(row)

    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]

    def fmt(row):
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()

    text = "\n".join([fmt(headers), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])
    return {"json": payload, "text": text}
