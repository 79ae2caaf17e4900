"""Run the acceptance suite; one PASS/FAIL line per criterion is printed at the end."""
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    sys.exit(pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", "-s", *sys.argv[1:]]))
