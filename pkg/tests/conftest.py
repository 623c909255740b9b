from acceptance_log import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance")
    for cid in sorted(RESULTS):
        ok, detail = RESULTS[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
