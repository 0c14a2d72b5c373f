import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, aggregated over the tests tagged with it."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            cid = props.get("criterion")
            if cid is None or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            ok, notes = rows.get(cid, (True, []))
            detail = props.get("detail")
            rows[cid] = (ok and outcome == "passed", notes + ([detail] if detail else []))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(rows, key=lambda c: int(c[1:])):
        ok, notes = rows[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {'; '.join(notes)}")
