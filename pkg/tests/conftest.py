from __future__ import annotations

import sys
from pathlib import Path

# lets test modules import the shared helpers module
sys.path.insert(0, str(Path(__file__).resolve().parent))



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
