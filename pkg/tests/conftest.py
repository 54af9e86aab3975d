import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from sepnorm.data import SyntheticDatasetSpec, generate, write_dataset
from sepnorm.encoder import EncoderConfig
from sepnorm.objectives import ObjectiveConfig
from sepnorm.train import OptimConfig, ProbeConfig, RunConfig

TINY_DATA = SyntheticDatasetSpec(train_size=32, test_size=32, image_side=8, seed=3)


def tiny_run(scheme="sep:bn+ln", steps=3, seed=0, lam=0.0, target="none") -> RunConfig:
    return RunConfig(
        EncoderConfig(image_side=8, patch_side=4, dim=8, depth=1, heads=2, norm_scheme=scheme),
        ObjectiveConfig(mask_ratio=0.5, lam=lam, uniformity_target=target,
                        decoder_depth=1, decoder_dim=8, decoder_heads=2),
        OptimConfig(steps=steps, batch_size=8),
        ProbeConfig(epochs=20),
        seed,
    )


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_data")
    write_dataset(d, generate(TINY_DATA))
    return d


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; asserts ``ok``."""
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: FAIL  (not evaluated: test errored or was deselected)")
