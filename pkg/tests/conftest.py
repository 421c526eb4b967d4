import _helpers


def pytest_terminal_summary(terminalreporter):
    results = _helpers.ACCEPTANCE
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, passed, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}")
