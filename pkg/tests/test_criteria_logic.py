import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialmatch.criteria_logic import (
    And,
    Atom,
    CanonicalClause,
    EligibilityClause,
    Literal,
    Not,
    Or,
    StructuredTrial,
    canonicalize,
    dedupe_clauses,
    parse_extractor_json,
    to_dnf,
)
from trialmatch.errors import ExpansionLimitExceeded, NoJsonFound, SchemaViolation

ATOMS = "ABCDEFGH"


# --- independent oracle -----------------------------------------------------
# Recursive evaluator written before to_dnf and kept separate from it.

def eval_expr(expr, assignment):
    if isinstance(expr, Atom):
        return assignment[expr.text]
    if isinstance(expr, Not):
        return not eval_expr(expr.child, assignment)
    if isinstance(expr, And):
        return all(eval_expr(c, assignment) for c in expr.children)
    if isinstance(expr, Or):
        return any(eval_expr(c, assignment) for c in expr.children)
    raise TypeError(expr)


def eval_dnf(conjunctions, assignment):
    return any(
        all(assignment[lit.text] != lit.negated for lit in conj)
        for conj in conjunctions
    )


def random_expr(rng, atoms, depth):
    if depth == 0 or rng.random() < 0.3:
        return Atom(rng.choice(atoms))
    roll = rng.random()
    if roll < 0.2:
        return Not(random_expr(rng, atoms, depth - 1))
    children = [random_expr(rng, atoms, depth - 1) for _ in range(rng.randint(1, 3))]
    return And(*children) if roll < 0.6 else Or(*children)


def assert_equivalent(expr, atoms):
    dnf = to_dnf(expr)
    n = len(atoms)
    for bits in range(2**n):
        assignment = {a: bool(bits >> i & 1) for i, a in enumerate(atoms)}
        assert eval_expr(expr, assignment) == eval_dnf(dnf, assignment), (
            f"diverges on {assignment} for {expr}"
        )


# --- to_dnf -----------------------------------------------------------------

def test_single_atom():
    assert to_dnf(Atom("A")) == [[Literal("A")]]


def test_distribution_law():
    dnf = to_dnf(And(Or(Atom("A"), Atom("B")), Atom("C")))
    assert dnf == [
        [Literal("A"), Literal("C")],
        [Literal("B"), Literal("C")],
    ]


def test_de_morgan_pushes_negation_to_atoms():
    dnf = to_dnf(Not(And(Atom("A"), Atom("B"))))
    assert dnf == [[Literal("A", negated=True)], [Literal("B", negated=True)]]


def test_contradiction_collapses_to_empty():
    assert to_dnf(And(Atom("A"), Not(Atom("A")))) == []


def test_subsumed_conjunction_removed():
    # A or (A and B): the second conjunction is redundant
    dnf = to_dnf(Or(Atom("A"), And(Atom("A"), Atom("B"))))
    assert dnf == [[Literal("A")]]


def test_no_superset_conjunctions():
    rng = random.Random(7)
    for _ in range(50):
        dnf = to_dnf(random_expr(rng, ATOMS[:5], 4))
        sets = [frozenset(c) for c in dnf]
        for i, a in enumerate(sets):
            for j, b in enumerate(sets):
                if i != j:
                    assert not a < b, "subsumed conjunction survived"


def test_expansion_cap():
    # 10 two-way ORs under one AND want 1024 conjunctions
    expr = And(*[Or(Atom(f"a{i}"), Atom(f"b{i}")) for i in range(10)])
    with pytest.raises(ExpansionLimitExceeded):
        to_dnf(expr, max_conjunctions=512)
    assert len(to_dnf(expr, max_conjunctions=2048)) == 1024


def test_random_equivalence_against_truth_tables():
    rng = random.Random(42)
    for _ in range(150):
        n = rng.randint(1, 6)
        assert_equivalent(random_expr(rng, ATOMS[:n], 4), ATOMS[:n])


def test_deterministic_output():
    rng = random.Random(9)
    for _ in range(25):
        expr = random_expr(rng, ATOMS[:5], 4)
        assert to_dnf(expr) == to_dnf(expr)


@st.composite
def expr_strategy(draw, depth=3):
    if depth == 0:
        return Atom(draw(st.sampled_from(ATOMS[:5])))
    kind = draw(st.integers(0, 3))
    if kind == 0:
        return Atom(draw(st.sampled_from(ATOMS[:5])))
    if kind == 1:
        return Not(draw(expr_strategy(depth=depth - 1)))
    children = draw(st.lists(expr_strategy(depth=depth - 1), min_size=1, max_size=3))
    return And(*children) if kind == 2 else Or(*children)


@settings(max_examples=60, deadline=None)
@given(expr_strategy())
def test_property_truth_table_equivalence(expr):
    assert_equivalent(expr, ATOMS[:5])


# --- canonicalization -------------------------------------------------------

def test_canonicalize_case_and_whitespace():
    a = EligibilityClause(histology_inclusion="Solid Tumor", biomarker_inclusion=("RAS mutation",))
    b = EligibilityClause(histology_inclusion="solid  tumor", biomarker_inclusion=(" ras  Mutation",))
    assert canonicalize(a) == canonicalize(b)


def test_canonicalize_sort_invariance():
    a = EligibilityClause(histology_inclusion="x", histology_exclusion=("p", "q"), biomarker_exclusion=("m", "n"))
    b = EligibilityClause(histology_inclusion="x", histology_exclusion=("q", "p"), biomarker_exclusion=("n", "m"))
    assert canonicalize(a) == canonicalize(b)


def test_canonicalize_idempotent_over_fixture_corpus():
    clauses = [
        EligibilityClause(histology_inclusion="Breast  Cancer", biomarker_inclusion=("HER2 Positive", "her2 positive")),
        EligibilityClause(histology_inclusion="melanoma", disease_state="Metastatic"),
        EligibilityClause(histology_inclusion="NSCLC", biomarker_exclusion=("KRAS mutation",)),
    ]
    for clause in clauses:
        canon = canonicalize(clause)
        # re-canonicalizing a clause built from the canonical form is a no-op
        rebuilt = EligibilityClause(
            disease_state=canon.disease_state,
            histology_inclusion=canon.histology_inclusion,
            biomarker_inclusion=canon.biomarker_inclusion,
            histology_exclusion=canon.histology_exclusion,
            biomarker_exclusion=canon.biomarker_exclusion,
        )
        assert canonicalize(rebuilt) == canon


def test_cohort_excluded_from_identity():
    a = EligibilityClause(cohort="Part 1", histology_inclusion="x")
    b = EligibilityClause(cohort="Part 2", histology_inclusion="x")
    assert canonicalize(a) == canonicalize(b)
    assert len(dedupe_clauses([a, b])) == 1


def test_canonical_clause_is_hashable_and_ordered():
    a = canonicalize(EligibilityClause(histology_inclusion="a"))
    b = canonicalize(EligibilityClause(histology_inclusion="b"))
    assert isinstance(a, CanonicalClause)
    assert len({a, b}) == 2
    assert a < b


# --- extractor JSON parsing -------------------------------------------------

def _demo_output() -> str:
    from importlib import resources

    doc = json.loads(
        resources.files("trialmatch.data")
        .joinpath("demonstrations/demo_01_dcc3116.json")
        .read_text("utf-8")
    )
    return doc["output"]


def test_parse_demonstration_output():
    clauses = parse_extractor_json(_demo_output())
    assert len(clauses) >= 3
    first = clauses[0]
    assert first.cohort == "Dose Escalation Phase (Part 1)"
    assert first.disease_state == "advanced or metastatic"
    assert first.histology_inclusion == "Solid Tumor"
    assert first.biomarker_inclusion == ("RAS mutation",)
    assert first.histology_exclusion == ()
    assert first.biomarker_exclusion == ()


def test_parse_empty_array():
    assert parse_extractor_json("[]") == []


def test_parse_drops_clause_without_histology():
    text = json.dumps([
        {"cohort": "", "disease_state": "", "histology_inclusion": "melanoma",
         "biomarker_inclusion": [], "histology_exclusion": [], "biomarker_exclusion": []},
        {"cohort": "", "disease_state": "advanced", "histology_inclusion": "",
         "biomarker_inclusion": ["KRAS mutation"], "histology_exclusion": [], "biomarker_exclusion": []},
    ])
    clauses = parse_extractor_json(text)
    assert len(clauses) == 1
    assert clauses[0].histology_inclusion == "melanoma"


def test_parse_strips_code_fences_and_prose():
    text = "Sure, here is the structure:\n```json\n" + _demo_output() + "\n```\nLet me know."
    assert len(parse_extractor_json(text)) >= 3


def test_parse_skips_non_array_brackets_in_prose():
    text = "[note] the result follows: " + _demo_output()
    assert len(parse_extractor_json(text)) >= 3


def test_parse_unknown_keys_dropped(caplog):
    text = json.dumps([{"histology_inclusion": "melanoma", "age": ">=18"}])
    with caplog.at_level("WARNING"):
        clauses = parse_extractor_json(text)
    assert clauses[0].histology_inclusion == "melanoma"
    assert "age" in caplog.text


def test_parse_no_json_raises():
    with pytest.raises(NoJsonFound):
        parse_extractor_json("the trial could not be structured")


def test_parse_non_object_element_raises():
    with pytest.raises(SchemaViolation):
        parse_extractor_json('["just a string"]')


def test_parse_drops_overlapping_inclusion_exclusion():
    text = json.dumps([
        {"histology_inclusion": "melanoma", "histology_exclusion": ["Melanoma"]},
        {"histology_inclusion": "breast cancer"},
    ])
    clauses = parse_extractor_json(text)
    assert len(clauses) == 1
    assert clauses[0].histology_inclusion == "breast cancer"


# --- StructuredTrial round-trip ----------------------------------------------

def test_structured_trial_json_round_trip(tmp_path):
    trial = StructuredTrial(
        nct_id="NCT90000001",
        clauses=[
            EligibilityClause(
                cohort="A", disease_state="metastatic",
                histology_inclusion="colorectal cancer",
                biomarker_inclusion=("KRAS G12C",),
                histology_exclusion=("CNS tumor",),
            )
        ],
        provenance={"backend": "baseline", "shots": 0},
    )
    doc = trial.to_json_dict()
    again = StructuredTrial.from_json_dict(json.loads(json.dumps(doc)))
    assert again == trial
    assert again.provenance == {"backend": "baseline", "shots": 0}


def test_strict_load_rejects_missing_histology():
    with pytest.raises(SchemaViolation):
        StructuredTrial.from_json_dict(
            {"nct_id": "NCT90000001", "clauses": [{"histology_inclusion": ""}]},
            strict=True,
        )
