import json
import logging
import time
from pathlib import Path

import pytest

from semroute import pipeline, scenario

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("fixture")
    scenario.generate(d, scenario.ScenarioParams())
    return d


@pytest.fixture(scope="session")
def ground_truth(fixture_dir) -> dict:
    return json.loads((fixture_dir / "ground_truth.json").read_text())


@pytest.fixture(scope="session")
def fixture_run(fixture_dir):
    """One full pipeline run over the generated fixture: (cfg, report, summary, seconds)."""
    logger = logging.getLogger("semroute")
    level = logger.level
    logger.setLevel(logging.ERROR)
    try:
        cfg = pipeline.RunConfig.load(fixture_dir / "config.json")
        t0 = time.perf_counter()
        report_path, summary = pipeline.run_all(cfg)
        elapsed = time.perf_counter() - t0
    finally:
        logger.setLevel(level)
    return cfg, json.loads(report_path.read_text()), summary, elapsed


def match_incidents(report: dict, truth: dict) -> tuple[list, list]:
    """Per incident, the reported event ids covering it (shared prefix, overlapping
    interval, responsible AS listed); plus the ids of reported events matching none."""
    hits, used = [], set()
    for inc in truth["incidents"]:
        ids = []
        for ev in report["events"]:
            overlap = ev["start"] <= inc["end"] and inc["start"] <= ev["end"]
            if overlap and set(ev["prefixes"]) & set(inc["prefixes"]):
                used.add(ev["event_id"])
                if inc["responsible_as"] in ev["responsible_ases"]:
                    ids.append(ev["event_id"])
        hits.append(ids)
    false = [ev["event_id"] for ev in report["events"] if ev["event_id"] not in used]
    return hits, false
