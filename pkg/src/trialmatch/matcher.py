"""Match structured trials against structured patient records, with traces.

A trial matches when any of its clauses is fully satisfied: the histology
inclusion subsumes the patient histology, every biomarker inclusion atom is
covered by some patient biomarker (one patient biomarker may cover several
atoms), the disease-state criterion holds, and no exclusion atom triggers.

Unresolved atoms (criterion text the ontology cannot interpret) follow the
strictness policy: by default an unresolved inclusion atom fails its clause
and an unresolved exclusion atom never triggers; lenient mode skips
unresolved inclusion atoms instead, and ignore-exclusions mode disables
exclusion checks entirely (the recall-favoring policy of legacy expert
systems).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources

from .criteria_logic import EligibilityClause, StructuredTrial, canonical_text
from .errors import UnparseableBiomarker
from .ontology import (
    OncoTree,
    PathwayMap,
    default_pathways,
    load_oncotree,
    parse_biomarker,
    subsumes_biomarker,
)

logger = logging.getLogger(__name__)

HISTOLOGY_INC = "histology_inc"
BIOMARKER_INC = "biomarker_inc"
HISTOLOGY_EXC = "histology_exc"
BIOMARKER_EXC = "biomarker_exc"
DISEASE_STATE = "disease_state"

_STAGE = re.compile(r"(?i)\bstage\s+(IV|III|II|I)([ABC]?)\b")
_STAGE_VALUE = re.compile(r"(?i)\b(IV|III|II|I)([ABC]?)\b")


def _default_disease_rules() -> dict:
    text = resources.files("trialmatch.data").joinpath("matcher_defaults.json").read_text("utf-8")
    return json.loads(text)["disease_state_rules"]


# ---------------------------------------------------------------------------
# Patient records
# ---------------------------------------------------------------------------

@dataclass
class PatientRecord:
    """Structured patient attributes; biomarkers stay as raw atom strings."""

    patient_id: str
    birth_date: str = ""
    gender: str = ""
    tumor_site: str = ""
    histology: str = ""  # hierarchy code
    stage: str = ""
    disease_descriptors: frozenset[str] = frozenset()
    biomarkers: tuple[str, ...] = ()
    pd_l1: dict | None = None  # {"score_kind": "CPS"|"TPS", "value": number}
    medications: tuple[str, ...] = ()
    labs: tuple[dict, ...] = ()

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PatientRecord":
        return cls(
            patient_id=doc["patient_id"],
            birth_date=doc.get("birth_date", ""),
            gender=doc.get("gender", ""),
            tumor_site=doc.get("tumor_site", ""),
            histology=doc.get("histology", ""),
            stage=doc.get("stage", ""),
            disease_descriptors=frozenset(d.lower() for d in doc.get("disease_descriptors", ())),
            biomarkers=tuple(doc.get("biomarkers", ())),
            pd_l1=doc.get("pd_l1"),
            medications=tuple(doc.get("medications", ())),
            labs=tuple(doc.get("labs", ())),
        )

    def to_json_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "birth_date": self.birth_date,
            "gender": self.gender,
            "tumor_site": self.tumor_site,
            "histology": self.histology,
            "stage": self.stage,
            "disease_descriptors": sorted(self.disease_descriptors),
            "biomarkers": list(self.biomarkers),
            "pd_l1": self.pd_l1,
            "medications": list(self.medications),
            "labs": list(self.labs),
        }


def load_patients(path) -> list[PatientRecord]:
    patients = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                patients.append(PatientRecord.from_json_dict(json.loads(line)))
    return patients


def validate_patient(patient: PatientRecord, tree: OncoTree) -> None:
    """Histology code must resolve; unparseable biomarkers stay opaque with a warning."""
    tree.get(patient.histology)
    for atom in patient.biomarkers:
        try:
            parse_biomarker(atom)
        except UnparseableBiomarker:
            logger.warning("patient %s: opaque biomarker %r", patient.patient_id, atom)


# ---------------------------------------------------------------------------
# Match context and traces
# ---------------------------------------------------------------------------

@dataclass
class MatchContext:
    """Shared immutable matching state: ontologies, policy flags, rules."""

    tree: OncoTree = field(default_factory=load_oncotree)
    pathways: PathwayMap = field(default_factory=default_pathways)
    disease_rules: dict = field(default_factory=_default_disease_rules)
    lenient: bool = False
    ignore_exclusions: bool = False


@dataclass
class ConditionResult:
    atom: str
    kind: str
    satisfied: bool
    reason: str
    unresolved: bool = False

    def to_json_dict(self) -> dict:
        return {
            "atom": self.atom,
            "kind": self.kind,
            "satisfied": self.satisfied,
            "reason": self.reason,
            "unresolved": self.unresolved,
        }


@dataclass
class ClauseTrace:
    clause: EligibilityClause
    conditions: list[ConditionResult]
    satisfied: bool

    def to_json_dict(self) -> dict:
        return {
            "clause": self.clause.to_json_dict(),
            "conditions": [c.to_json_dict() for c in self.conditions],
            "satisfied": self.satisfied,
        }


@dataclass
class MatchResult:
    """Per-trial verdict; matched_clause_index is 0-based into the clause list."""

    eligible: bool
    matched_clause_index: int | None
    clause_traces: list[ClauseTrace]

    def to_json_dict(self) -> dict:
        return {
            "eligible": self.eligible,
            "matched_clause_index": self.matched_clause_index,
            "clause_traces": [t.to_json_dict() for t in self.clause_traces],
        }


# ---------------------------------------------------------------------------
# Condition evaluation
# ---------------------------------------------------------------------------

def _parse_stage(text: str) -> tuple[str, str] | None:
    m = _STAGE_VALUE.search(text)
    return (m.group(1).upper(), m.group(2).upper()) if m else None


def _check_histology(ctx: MatchContext, atom: str, patient: PatientRecord) -> tuple[bool, bool, str]:
    """-> (satisfied, unresolved, reason)"""
    concepts = ctx.tree.normalize(atom)
    if not concepts:
        return False, True, f"no hierarchy concept resolves {atom!r}"
    patient_concept = ctx.tree.get(patient.histology)
    for concept in concepts:
        if ctx.tree.subsumes(concept, patient_concept):
            return True, False, f"{concept.code} subsumes patient histology {patient.histology}"
    codes = ",".join(c.code for c in concepts)
    return False, False, f"patient histology {patient.histology} not under {codes}"


def _check_biomarker(ctx: MatchContext, atom: str, patient: PatientRecord) -> tuple[bool, bool, str]:
    """-> (satisfied, unresolved, reason)"""
    try:
        criterion = parse_biomarker(atom, ctx.pathways)
    except UnparseableBiomarker:
        key = canonical_text(atom)
        for raw in patient.biomarkers:
            if canonical_text(raw) == key:
                return True, False, f"opaque atom equals patient biomarker {raw!r}"
        return False, True, f"unparseable biomarker atom {atom!r} with no literal patient match"

    for raw in patient.biomarkers:
        try:
            candidate = parse_biomarker(raw, ctx.pathways)
        except UnparseableBiomarker:
            continue
        if subsumes_biomarker(criterion, candidate, ctx.pathways):
            return True, False, f"covers patient biomarker {raw!r}"
    return False, False, f"no patient biomarker subsumed by {atom!r}"


def _check_disease_state(ctx: MatchContext, criterion: str, patient: PatientRecord) -> tuple[bool, bool, str]:
    """-> (satisfied, unresolved, reason); empty criterion is always satisfied."""
    text = canonical_text(criterion)
    if not text:
        return True, False, "no disease-state requirement"
    patient_stage = _parse_stage(patient.stage)

    recognized = False
    for token, rule in ctx.disease_rules.items():
        if re.search(rf"\b{re.escape(token)}\b", text):
            recognized = True
            if patient.disease_descriptors & set(rule["descriptors"]):
                hit = sorted(patient.disease_descriptors & set(rule["descriptors"]))
                return True, False, f"descriptor {hit[0]!r} satisfies {token!r}"
            if patient_stage and patient_stage[0] in rule["stages"]:
                return True, False, f"stage {patient.stage} satisfies {token!r}"
    for m in _STAGE.finditer(text):
        recognized = True
        want = (m.group(1).upper(), m.group(2).upper())
        if patient_stage and patient_stage[0] == want[0] and (not want[1] or want[1] == patient_stage[1]):
            return True, False, f"patient stage {patient.stage} matches {m.group(0)!r}"
    if recognized:
        return False, False, f"patient state does not satisfy {criterion!r}"
    return False, True, f"unrecognized disease-state wording {criterion!r}"


# ---------------------------------------------------------------------------
# Clause and trial matching
# ---------------------------------------------------------------------------

def _inclusion_result(ctx: MatchContext, atom: str, kind: str, check) -> ConditionResult:
    satisfied, unresolved, reason = check
    if unresolved and ctx.lenient:
        return ConditionResult(atom, kind, True, reason + " (unresolved, skipped by lenient policy)", True)
    return ConditionResult(atom, kind, satisfied, reason, unresolved)


def match_clause(clause: EligibilityClause, patient: PatientRecord, ctx: MatchContext | None = None) -> ClauseTrace:
    """Evaluate one clause, recording every atom's outcome and reason."""
    ctx = ctx or MatchContext()
    conditions: list[ConditionResult] = []

    if clause.histology_inclusion.strip():
        conditions.append(
            _inclusion_result(
                ctx, clause.histology_inclusion, HISTOLOGY_INC,
                _check_histology(ctx, clause.histology_inclusion, patient),
            )
        )
    for atom in clause.biomarker_inclusion:
        conditions.append(
            _inclusion_result(ctx, atom, BIOMARKER_INC, _check_biomarker(ctx, atom, patient))
        )

    satisfied_so_far = all(c.satisfied for c in conditions)

    disease = _check_disease_state(ctx, clause.disease_state, patient)
    conditions.append(_inclusion_result(ctx, clause.disease_state, DISEASE_STATE, disease))
    satisfied_so_far = satisfied_so_far and conditions[-1].satisfied

    exclusion_atoms = [(a, HISTOLOGY_EXC, _check_histology) for a in clause.histology_exclusion]
    exclusion_atoms += [(a, BIOMARKER_EXC, _check_biomarker) for a in clause.biomarker_exclusion]
    triggered = False
    for atom, kind, checker in exclusion_atoms:
        if ctx.ignore_exclusions:
            conditions.append(
                ConditionResult(atom, kind, False, "exclusion ignored by policy", False)
            )
            continue
        hit, unresolved, reason = checker(ctx, atom, patient)
        # an unresolved exclusion atom never triggers
        hit = hit and not unresolved
        conditions.append(ConditionResult(atom, kind, hit, reason, unresolved))
        triggered = triggered or hit

    return ClauseTrace(clause=clause, conditions=conditions, satisfied=satisfied_so_far and not triggered)


def match_trial(trial: StructuredTrial, patient: PatientRecord, ctx: MatchContext | None = None) -> MatchResult:
    """OR over clause traces; the first satisfied clause (0-based) wins."""
    ctx = ctx or MatchContext()
    traces = [match_clause(clause, patient, ctx) for clause in trial.clauses]
    matched = next((i for i, t in enumerate(traces) if t.satisfied), None)
    return MatchResult(
        eligible=matched is not None,
        matched_clause_index=matched,
        clause_traces=traces,
    )


# ---------------------------------------------------------------------------
# Candidate ranking
# ---------------------------------------------------------------------------

_SCORED_KINDS = (HISTOLOGY_INC, BIOMARKER_INC, DISEASE_STATE)


@dataclass
class CandidateEntry:
    nct_id: str
    eligible: bool
    matched_clause_index: int | None
    score: int

    def to_json_dict(self) -> dict:
        return {
            "nct_id": self.nct_id,
            "eligible": self.eligible,
            "matched_clause_index": self.matched_clause_index,
            "score": self.score,
        }


@dataclass
class CandidateList:
    patient_id: str
    entries: list[CandidateEntry]


def _specificity(result: MatchResult) -> int:
    if result.matched_clause_index is None:
        return 0
    trace = result.clause_traces[result.matched_clause_index]
    return sum(
        1 for c in trace.conditions
        if c.kind in _SCORED_KINDS and c.satisfied and c.atom.strip()
    )


def rank_candidates(
    patient: PatientRecord,
    trials: list[StructuredTrial],
    ctx: MatchContext | None = None,
    results: dict[str, MatchResult] | None = None,
) -> CandidateList:
    """Deterministic ranking: eligible first, then matched-atom count, then id.

    Pass precomputed MatchResults via `results` to avoid re-matching.
    """
    ctx = ctx or MatchContext()
    entries = []
    for trial in trials:
        result = (results or {}).get(trial.nct_id) or match_trial(trial, patient, ctx)
        entries.append(
            CandidateEntry(
                nct_id=trial.nct_id,
                eligible=result.eligible,
                matched_clause_index=result.matched_clause_index,
                score=_specificity(result),
            )
        )
    entries.sort(key=lambda e: (not e.eligible, -e.score, e.nct_id))
    return CandidateList(patient_id=patient.patient_id, entries=entries)
