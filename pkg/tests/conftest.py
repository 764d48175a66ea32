import pytest

from flowmot.experiment import fit_checkpoint, simulate
from flowmot.flow import FlowConfig
from flowmot.sim import preset


@pytest.fixture(scope="session")
def gt_checkpoint():
    """Small joint model trained on exact-distance "hard" sequences."""
    seqs = [simulate(preset("hard", 1000 + s), gt_distances=True) for s in range(6)]
    cfg = FlowConfig(n_blocks=4, hidden=32, epochs=8, batch_size=256, seed=0)
    ckpt, _ = fit_checkpoint(seqs, cfg, "flow")
    return ckpt


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
