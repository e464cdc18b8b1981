import re

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    res = _RESULTS.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "notes": []})
    res["seconds"] += rep.duration
    if rep.failed:
        res["ok"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        msg = re.sub(r"\s+", " ", msg)[:200]
        res["notes"].append(f"{rep.when} failed: {msg}")
    if rep.when == "call":
        res["notes"] = [f"{k}={v}" for k, v in item.user_properties] + res["notes"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        line = f"criterion {number} {'PASS' if r['ok'] else 'FAIL'}: {r['title']} [{r['seconds']:.0f}s]"
        if r["notes"]:
            line += " | " + "; ".join(r["notes"])
        terminalreporter.write_line(line)
