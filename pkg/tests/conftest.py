import numpy as np
import pytest

from tripforecast import data, explain, nn

# Every attribution computed anywhere in the suite must satisfy efficiency.
EFFICIENCY_TOL = 1e-8
EFFICIENCY_LOG: list[float] = []
_timeshap = explain.timeshap


def _checked_timeshap(*args, **kwargs):
    att = _timeshap(*args, **kwargs)
    gap = abs(att.efficiency_gap)
    EFFICIENCY_LOG.append(gap)
    assert gap <= EFFICIENCY_TOL, f"efficiency gap {gap}"
    return att


explain.timeshap = _checked_timeshap

# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
    if EFFICIENCY_LOG:
        terminalreporter.write_line(
            f"efficiency identity: {len(EFFICIENCY_LOG)} explanations, max |gap| = {max(EFFICIENCY_LOG):.3e} (tol {EFFICIENCY_TOL:g})"
        )


def small_config(variant="PM4", L=6, **kw):
    return nn.ModelConfig(
        variant=variant,
        lstm_layer_sizes=kw.pop("lstm_layer_sizes", (4, 6, 4)),
        attention_size=kw.pop("attention_size", 8),
        fc_sizes=kw.pop("fc_sizes", (5, 2)),
        max_seq_len=L,
        **kw,
    )


def random_batch(rng, B, L, lengths=None):
    """Padded batch with valid one-hot weekday columns."""
    vlen = np.asarray(lengths) if lengths is not None else rng.integers(1, L + 1, size=B)
    feats = np.zeros((B, L, nn.N_FEATURES))
    for b, n in enumerate(vlen):
        feats[b, :n, :2] = rng.uniform(0, 1, size=(n, 2))
        feats[b, np.arange(n), 2 + rng.integers(0, 7, size=n)] = 1.0
    return feats, vlen


@pytest.fixture(scope="session")
def small_fleet():
    return data.generate_synthetic(data.FleetSpec(vehicles=4, days=40, seed=3))


@pytest.fixture(scope="session")
def small_dataset(small_fleet):
    return data.prepare_dataset(small_fleet, window_days=4, max_seq_len=10)
