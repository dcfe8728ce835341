from __future__ import annotations

import pytest

from tgnet.demand import ODMatrix
from tgnet.network import Link, Node, RoadClass, RoadNetwork, StudyFrame

_ACCEPTANCE: list[tuple[str, str, str]] = []


def parallel_links(t0=(1.0, 1.0), cap=(100.0, 100.0)) -> RoadNetwork:
    """Origin ``o`` and destination ``d`` joined by two links with explicit
    free-flow times and capacities (the second one bends through (0.5, 0.5))."""
    nodes = [Node("o", 0.0, 0.0), Node("d", 1.0, 0.0)]
    links = [Link("l1", "o", "d", ((0.0, 0.0), (1.0, 0.0)), RoadClass.TRUNK,
                  capacity=cap[0], free_flow_time=t0[0]),
             Link("l2", "o", "d", ((0.0, 0.0), (0.5, 0.5), (1.0, 0.0)), RoadClass.TRUNK,
                  capacity=cap[1], free_flow_time=t0[1])]
    return RoadNetwork.build(nodes, links, StudyFrame(0.0, 0.0, 1.0, 1.0))


def single_pair_od(q: float, origin="o", dest="d") -> ODMatrix:
    return ODMatrix({((0, 0), (0, 1)): q}, {(0, 0): origin, (0, 1): dest})


@pytest.fixture
def two_parallel():
    return parallel_links()


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    _ACCEPTANCE.append((name, report.outcome, getattr(report, "acceptance_detail", "")))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    detail = getattr(item, "acceptance_detail", None)
    if detail is not None:
        rep.acceptance_detail = detail


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
