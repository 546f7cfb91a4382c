import numpy as np
import pytest

from efformer.data import ClipBatch
from efformer.model import EFTransformer, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(rng, B=3, n_obs=3, n_tgt=1, T=10, n_actions=5, w=640.0, h=480.0) -> ClipBatch:
    start = rng.uniform(50, 400, size=(B, n_obs + n_tgt, 1, 2))
    steps = rng.normal(0, 8, size=(B, n_obs + n_tgt, T - 1, 2))
    pos = np.concatenate([start, start + np.cumsum(steps, axis=2)], axis=2)
    act = rng.integers(0, n_actions, size=(B, n_obs + n_tgt, T))
    return ClipBatch(pos[:, :n_obs], act[:, :n_obs], pos[:, n_obs:], act[:, n_obs:],
                     np.tile([w, h], (B, 1)), [f"c{i}" for i in range(B)])


def small_model(decoder="ef", encoder="st", n_obs=3, n_tgt=1, n_actions=5, layers=2, seed=0, **kw):
    cfg = ModelConfig(n_obs=n_obs, n_tgt=n_tgt, n_actions=n_actions, layers=layers, heads=2, geom_dim=8,
                      action_dim=8, head_dim=4, ffn_dim=16, pred_hidden=16, encoder=encoder, decoder=decoder,
                      **kw)
    return EFTransformer(cfg, seed=seed)


# acceptance lines recorded by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
    out = config.rootpath / "acceptance_results.txt"
    out.write_text("\n".join(sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":")))) + "\n")
