import re

CRITERIA = {
    1: "saliency patch picker oracle suite",
    2: "rank-weighted aggregation oracle",
    3: "head gradient finite-difference check",
    4: "CAM / gradient-weighted map consistency",
    5: "salimap beats typical by >= 5 points",
    6: "CAM localization on positives",
    7: "instance balancing audit",
    8: "run-all determinism",
}

_outcomes = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        detail = dict(report.user_properties).get("detail", "")
        prev = _outcomes.get(n)
        if prev is None or prev[0] == "PASS":
            status = "PASS" if report.passed else "FAIL" if report.failed else "SKIP"
            _outcomes[n] = (status, detail or (prev[1] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = _outcomes.get(n, ("NOT RUN", ""))
        line = f"criterion {n} [{CRITERIA[n]}]: {status}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
