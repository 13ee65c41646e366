"""Run the acceptance suite and print only the per-criterion PASS/FAIL lines."""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    proc = subprocess.run([sys.executable, "-m", "pytest", str(ROOT / "tests" / "test_acceptance.py"), "-s", "-q"],
                          capture_output=True, text=True, cwd=ROOT)
    lines = [l for l in proc.stdout.splitlines() if l.startswith("CRITERION")]
    print("\n".join(lines) if lines else proc.stdout + proc.stderr)
    print(f"{sum(' PASS ' in l for l in lines)}/{len(lines)} criteria pass")
    return 0 if lines and all(" PASS " in l for l in lines) else 1


if __name__ == "__main__":
    sys.exit(main())
