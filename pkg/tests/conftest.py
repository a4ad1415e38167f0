import sys
from pathlib import Path

# lets test modules import the shared oracles in helpers.py
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    board = sys.modules.get("test_acceptance")
    if board is None or not board.SCOREBOARD:
        return
    terminalreporter.section("acceptance criteria")
    for line in board.SCOREBOARD:
        terminalreporter.write_line(line)
