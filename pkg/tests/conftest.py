import pathlib
import shutil

import pytest

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


def build_service_data_dir(target: pathlib.Path) -> pathlib.Path:
    """Assemble a triage data directory from the corpus fixtures."""
    from trialmatch.criteria_logic import write_structured_trials
    from trialmatch.extraction import load_lexicon, run_extraction_batch
    from trialmatch.trial_ingest import parse_trial_xml, with_prepared_criteria, write_trial_docs

    target.mkdir(parents=True, exist_ok=True)
    docs = sorted(
        (
            with_prepared_criteria(parse_trial_xml(p.read_bytes()))
            for p in (FIXTURES / "corpus" / "trials").glob("*.xml")
        ),
        key=lambda d: d.nct_id,
    )
    write_trial_docs(target / "trials.jsonl", docs)
    structured, _ = run_extraction_batch(docs, backend="baseline", lexicon=load_lexicon())
    write_structured_trials(target / "structured.jsonl", structured)
    shutil.copy(FIXTURES / "corpus" / "patients.jsonl", target / "patients.jsonl")
    (target / "PHI_GUARD").write_text("synthetic fixture data only\n")
    return target


@pytest.fixture(scope="session")
def service_data_dir(tmp_path_factory) -> pathlib.Path:
    return build_service_data_dir(tmp_path_factory.mktemp("triage_data"))


_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
