import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay the acceptance-criteria verdict lines after the run.

    The acceptance tests print their verdicts as they finish, but pytest's
    default fd-level capture swallows output of passing tests; the summary
    keeps one visible line per criterion in every capture mode.
    """
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
