"""Run the acceptance suite and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py [extra pytest args]

Exit status is pytest's: 0 when every criterion passes.
"""
from __future__ import annotations

import sys
from pathlib import Path

import pytest

HERE = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    sys.exit(pytest.main([str(HERE / "tests" / "test_acceptance.py"), "-q", "-s", *sys.argv[1:]]))
