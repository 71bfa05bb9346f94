import time

import pytest

# Criterion lines recorded by the acceptance suite, printed at session end.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion():
    """criterion(n, ok, detail): record one PASS/FAIL line, then assert."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def trained():
    """Desk-scale experiment: 20k train, 1k calibration, 5k held-out test."""
    from edgeqst import nn, quant
    from edgeqst.datagen import GenConfig, generate_dataset

    train_ds = generate_dataset(GenConfig(n_examples=20_000, global_seed=1))
    calib_ds = generate_dataset(GenConfig(n_examples=1_000, global_seed=2))
    test_ds = generate_dataset(GenConfig(n_examples=5_000, global_seed=3))
    t0 = time.perf_counter()
    result = nn.train(train_ds, nn.TrainConfig())
    train_s = time.perf_counter() - t0
    stats = quant.collect_calibration_stats(result.model, calib_ds.values)
    qm = quant.quantize_model(result.model, stats)
    return {
        "model": result.model, "stats": stats, "qmodel": qm, "train_s": train_s,
        "calib": calib_ds, "test": test_ds, "result": result,
    }
