import json
import os

import torch

# single-threaded reductions keep every run bit-reproducible
torch.set_num_threads(1)

ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str, status: str | None = None):
    ACCEPTANCE[criterion] = {"status": status or ("PASS" if passed else "FAIL"), "detail": detail}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        r = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {r['status']} - {r['detail']}")
    out = os.environ.get("PARTMOTION_ACCEPTANCE_JSON")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(ACCEPTANCE, fh, indent=2, sort_keys=True)
