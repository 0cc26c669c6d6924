import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS and not hasattr(module, "test_metrla_training"):
        return
    names = {name for name, _, _ in module.RESULTS}
    rows = list(module.RESULTS)
    optional = "[optional] full METR-LA training, average test MAE <= 3.1"
    if optional not in names:
        rows.append((optional, None, "skipped: HIMNET_METRLA not set (excluded from the default suite)"))
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in rows:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"{status}  {name} -- {detail}")
