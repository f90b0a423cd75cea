"""Trial structuring: prompt building, LLM/baseline backends, direct match.

The LLM backend renders a TrialDoc into the structuring prompt, runs it
through the gateway, and parses the JSON clause array out of the response.
The offline baseline does dictionary/pattern extraction over criteria lines
instead, with section headers routing atoms to inclusion or exclusion; it
infers no nested logic. Multiple alternative histologies/biomarkers become
one clause per alternative (ambiguous connectives read as OR).
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

from .criteria_logic import (
    EligibilityClause,
    StructuredTrial,
    canonical_text,
    dedupe_clauses,
    parse_extractor_json,
)
from .errors import EmptyExtraction, LexiconMissing, TrialMatchError
from .llm_gateway import ChatClient, ChatMessage, PromptBundle, assemble_messages
from .ontology import OncoTree, load_oncotree
from .trial_ingest import TrialDoc

logger = logging.getLogger(__name__)

ALLOWED_SHOTS = (0, 3)

VERDICT_ELIGIBLE = "eligible"
VERDICT_NOT_ELIGIBLE = "not_eligible"
VERDICT_UNCERTAIN = "uncertain"


def _data_text(name: str) -> str:
    return resources.files("trialmatch.data").joinpath(name).read_text("utf-8")


# ---------------------------------------------------------------------------
# Job bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class ExtractionJob:
    trial: TrialDoc
    shots: int = 0
    backend: str = "llm"
    status: str = "pending"  # pending | done | failed
    failure_reason: str | None = None

    def __post_init__(self):
        if self.shots not in ALLOWED_SHOTS:
            raise ValueError(f"shots must be one of {ALLOWED_SHOTS}")
        if self.backend not in ("llm", "baseline"):
            raise ValueError(f"unknown backend {self.backend!r}")


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------

def load_prompt_template() -> tuple[str, str]:
    """(system message, instructions) for the structuring prompt."""
    return _data_text("prompt_system.txt").strip(), _data_text("prompt_instructions.txt").strip()


def load_demonstrations() -> list[tuple[str, str]]:
    """The three bundled few-shot (input, output) demonstration pairs."""
    demos = []
    demo_dir = resources.files("trialmatch.data").joinpath("demonstrations")
    for entry in sorted(demo_dir.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".json"):
            doc = json.loads(entry.read_text("utf-8"))
            demos.append((doc["input"], doc["output"]))
    return demos


def serialize_trial_input(doc: TrialDoc) -> str:
    """XML-like serialization of the trial fields, in demonstration order."""
    lines = []
    if doc.brief_title:
        lines.append(f"<brief_title>{doc.brief_title}</brief_title>")
    if doc.official_title:
        lines.append(f"<official_title>{doc.official_title}</official_title>")
    if doc.brief_summary:
        lines.append(f"<brief_summary>{doc.brief_summary}</brief_summary>")
    for condition in doc.conditions:
        lines.append(f"<condition>{condition}</condition>")
    for arm in doc.arm_groups:
        lines.append("<arm_group>")
        lines.append(f"<arm_group_label>{arm.label}</arm_group_label>")
        if arm.type:
            lines.append(f"<arm_group_type>{arm.type}</arm_group_type>")
        if arm.description:
            lines.append(f"<description>{arm.description}</description>")
        lines.append("</arm_group>")
    lines.append("<criteria>")
    lines.append(doc.criteria_text)
    lines.append("</criteria>")
    return "\n".join(lines)


def build_trial_prompt(trial: TrialDoc, shots: int = 0) -> PromptBundle:
    if shots not in ALLOWED_SHOTS:
        raise ValueError(f"shots must be one of {ALLOWED_SHOTS}")
    system, instructions = load_prompt_template()
    return PromptBundle(
        system_message=system,
        instructions=instructions,
        demonstrations=load_demonstrations() if shots else [],
        user_input=serialize_trial_input(trial),
    )


# ---------------------------------------------------------------------------
# Offline baseline
# ---------------------------------------------------------------------------

@dataclass
class Lexicon:
    histology_terms: dict[str, str]  # lowercase term -> hierarchy code
    biomarker_patterns: list[re.Pattern] = field(default_factory=list)
    disease_descriptors: tuple[str, ...] = ()


def load_lexicon(path=None, tree: OncoTree | None = None) -> Lexicon:
    """Baseline dictionary: histology terms from the hierarchy, biomarker regexes.

    Organ-level single-word labels are skipped (too noisy as substrings);
    their synonyms like "lung cancer" still resolve.
    """
    if path is None:
        raw = json.loads(_data_text("lexicon.json"))
    else:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    tree = tree or load_oncotree()

    terms: dict[str, str] = {}
    for code, concept in tree.nodes.items():
        depth = len(tree.ancestors(code))
        if depth == 0:
            continue
        if depth >= 2 or " " in concept.label:
            terms.setdefault(canonical_text(concept.label), code)
        for syn in concept.synonyms:
            terms.setdefault(canonical_text(syn), code)
    for term, code in raw.get("extra_histology_terms", {}).items():
        terms[canonical_text(term)] = code

    genes = sorted(raw.get("gene_symbols", []), key=len, reverse=True)
    gene_alt = "|".join(re.escape(g) for g in genes)
    patterns = [re.compile(p.replace("{GENE}", gene_alt)) for p in raw.get("biomarker_patterns", [])]

    return Lexicon(
        histology_terms=terms,
        biomarker_patterns=patterns,
        disease_descriptors=tuple(raw.get("disease_descriptors", ())),
    )


_SECTION = re.compile(r"(?i)\b(inclusion|exclusion)(?:\s+criteria\b\s*:?|\s*:)")
_STAGE = re.compile(r"(?i)\bstage\s+(IV|III|II|I)([ABC]?)\b")


def _sections(text: str):
    """Split criteria text into (mode, chunk) pairs; leading text is inclusion."""
    matches = list(_SECTION.finditer(text))
    if not matches:
        yield "inclusion", text
        return
    if matches[0].start() > 0:
        yield "inclusion", text[: matches[0].start()]
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        yield m.group(1).lower(), text[m.end():end]


def _maximal_spans(candidates: list[tuple[int, int, str]]) -> list[str]:
    """Longest-first non-overlapping span selection; returns span texts in document order."""
    chosen: list[tuple[int, int, str]] = []
    for start, end, span in sorted(candidates, key=lambda c: (-(c[1] - c[0]), c[0])):
        if all(end <= s or start >= e for s, e, _ in chosen):
            chosen.append((start, end, span))
    return [span for _, _, span in sorted(chosen)]


def _find_histologies(chunk: str, lexicon: Lexicon) -> list[str]:
    candidates = []
    lowered = chunk.lower()
    for term in lexicon.histology_terms:
        start = 0
        while True:
            idx = lowered.find(term, start)
            if idx < 0:
                break
            end = idx + len(term)
            boundary_ok = (idx == 0 or not lowered[idx - 1].isalnum()) and (
                end == len(lowered) or not lowered[end].isalnum()
            )
            if boundary_ok:
                candidates.append((idx, end, chunk[idx:end]))
            start = idx + 1
    return _maximal_spans(candidates)


def _find_biomarkers(chunk: str, lexicon: Lexicon) -> list[str]:
    candidates = []
    for pattern in lexicon.biomarker_patterns:
        for m in pattern.finditer(chunk):
            candidates.append((m.start(), m.end(), m.group(0).strip()))
    return _maximal_spans(candidates)


def _dedupe_atoms(atoms: list[str]) -> list[str]:
    seen = set()
    out = []
    for atom in atoms:
        key = canonical_text(atom)
        if key and key not in seen:
            seen.add(key)
            out.append(atom)
    return out


def baseline_extract(trial: TrialDoc, lexicon: Lexicon | None) -> StructuredTrial:
    """Dictionary/pattern extraction over criteria text.

    Atoms found under an exclusion header populate exclusion lists,
    everything else inclusion. Every detected inclusion histology opens a
    clause; with alternative biomarkers present, each (histology, biomarker)
    pair becomes its own clause. Exclusion atoms are copied onto every
    clause. The emitted atom text is the matched document span.
    """
    if lexicon is None:
        raise LexiconMissing("baseline backend needs a loaded lexicon")
    if not trial.criteria_text.strip():
        raise EmptyExtraction(f"{trial.nct_id}: empty criteria text")

    inc_hist: list[str] = []
    inc_bio: list[str] = []
    exc_hist: list[str] = []
    exc_bio: list[str] = []
    descriptors: list[str] = []
    stages: list[str] = []

    for mode, chunk in _sections(trial.criteria_text):
        hist = _find_histologies(chunk, lexicon)
        bio = _find_biomarkers(chunk, lexicon)
        if mode == "exclusion":
            exc_hist.extend(hist)
            exc_bio.extend(bio)
        else:
            inc_hist.extend(hist)
            inc_bio.extend(bio)
            lowered = chunk.lower()
            for word in lexicon.disease_descriptors:
                if re.search(rf"\b{re.escape(word)}\b", lowered):
                    descriptors.append(word)
            for m in _STAGE.finditer(chunk):
                stages.append(f"stage {m.group(1).upper()}{m.group(2).upper()}")

    inc_hist = _dedupe_atoms(inc_hist)
    inc_bio = _dedupe_atoms(inc_bio)
    exc_hist = _dedupe_atoms(exc_hist)
    exc_bio = _dedupe_atoms(exc_bio)

    ordered = [d for d in lexicon.disease_descriptors if d in descriptors]
    disease_state = " or ".join(_dedupe_atoms(ordered + sorted(set(stages))))

    inc_keys = {canonical_text(a) for a in inc_hist} | {canonical_text(a) for a in inc_bio}
    exc_hist = [a for a in exc_hist if canonical_text(a) not in inc_keys]
    exc_bio = [a for a in exc_bio if canonical_text(a) not in inc_keys]

    clauses = []
    for histology in inc_hist:
        for biomarkers in ([[b] for b in inc_bio] or [[]]):
            clauses.append(
                EligibilityClause(
                    cohort="",
                    disease_state=disease_state,
                    histology_inclusion=histology,
                    biomarker_inclusion=tuple(biomarkers),
                    histology_exclusion=tuple(exc_hist),
                    biomarker_exclusion=tuple(exc_bio),
                )
            )
    clauses = dedupe_clauses(clauses)
    if not clauses:
        raise EmptyExtraction(f"{trial.nct_id}: no lexicon hits in criteria")
    return StructuredTrial(
        nct_id=trial.nct_id,
        clauses=clauses,
        provenance={"backend": "baseline", "shots": 0},
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def extract_structured(
    trial: TrialDoc,
    backend: str = "llm",
    shots: int = 0,
    client: ChatClient | None = None,
    lexicon: Lexicon | None = None,
) -> StructuredTrial:
    """Run one trial through the chosen backend into a StructuredTrial."""
    if not trial.criteria_text.strip():
        raise EmptyExtraction(f"{trial.nct_id}: empty criteria text")
    if backend == "baseline":
        return baseline_extract(trial, lexicon)
    if client is None:
        raise ValueError("llm backend needs a ChatClient")
    bundle = build_trial_prompt(trial, shots)
    response = client.complete(assemble_messages(bundle))
    clauses = dedupe_clauses(parse_extractor_json(response))
    if not clauses:
        raise EmptyExtraction(f"{trial.nct_id}: no valid clause in backend output")
    return StructuredTrial(
        nct_id=trial.nct_id,
        clauses=clauses,
        provenance={"backend": "llm", "shots": shots},
    )


def run_extraction_batch(
    trials: list[TrialDoc],
    backend: str = "llm",
    shots: int = 0,
    client: ChatClient | None = None,
    lexicon: Lexicon | None = None,
    parallelism: int = 4,
) -> tuple[list[StructuredTrial], list[ExtractionJob]]:
    """Extract a batch; failures become failed jobs, never abort the batch.

    Results are sorted by nct_id so output files are order-independent.
    """
    jobs = [ExtractionJob(trial=t, shots=shots, backend=backend) for t in trials]

    def run(job: ExtractionJob):
        try:
            result = extract_structured(
                job.trial, backend=job.backend, shots=job.shots, client=client, lexicon=lexicon
            )
            job.status = "done"
            return result
        except TrialMatchError as exc:
            job.status = "failed"
            job.failure_reason = f"{type(exc).__name__}: {exc}"
            logger.warning("extraction failed for %s: %s", job.trial.nct_id, job.failure_reason)
            return None

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        outcomes = list(pool.map(run, jobs))

    results = sorted((r for r in outcomes if r is not None), key=lambda t: t.nct_id)
    return results, jobs


# ---------------------------------------------------------------------------
# Direct trial-patient matching
# ---------------------------------------------------------------------------

_NOT_ELIGIBLE = re.compile(r"\bnot\s+eligible\b|\bineligible\b", re.IGNORECASE)
_ELIGIBLE = re.compile(r"\beligible\b", re.IGNORECASE)


def parse_match_verdict(narrative: str) -> str:
    """Keyword verdict from the conclusion portion of a free-text response."""
    text = narrative.strip()
    if not text:
        return VERDICT_UNCERTAIN
    lowered = text.lower()
    idx = lowered.rfind("in conclusion")
    scope = text[idx:] if idx >= 0 else text.split("\n\n")[-1]
    if _NOT_ELIGIBLE.search(scope):
        return VERDICT_NOT_ELIGIBLE
    if _ELIGIBLE.search(scope):
        return VERDICT_ELIGIBLE
    return VERDICT_UNCERTAIN


def llm_direct_match(
    patient_bundle: str, trial: TrialDoc, client: ChatClient
) -> tuple[str, str]:
    """Ask the backend to reason over patient data against one trial.

    Returns (verdict, narrative). The narrative is the raw response; the
    verdict comes from keyword rules over its conclusion, defaulting to
    uncertain.
    """
    if not trial.criteria_text.strip():
        return VERDICT_UNCERTAIN, ""
    system = _data_text("direct_match_system.txt").replace(
        "{trial_detail}", serialize_trial_input(trial)
    )
    messages = [
        ChatMessage("system", system),
        ChatMessage("user", patient_bundle),
    ]
    narrative = client.complete(messages)
    return parse_match_verdict(narrative), narrative
