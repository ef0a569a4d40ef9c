import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "ACCEPTANCE_RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, elapsed in results:
        terminalreporter.write_line(
            f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}"
        )
        terminalreporter.write_line(f"[timing] {name}: {elapsed:.1f} s")
