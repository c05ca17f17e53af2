import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    from coic.rainsim import gen_mixed_dataset
    root = tmp_path_factory.mktemp("data")
    train = gen_mixed_dataset(["light", "heavy"], 6, root / "train", seed=0, image_size=32)
    held = gen_mixed_dataset(["light", "heavy"], 3, root / "eval", seed=1, image_size=32)
    return root, train, held


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
