from dataclasses import replace

import pytest
import torch
from hypothesis import settings

from regdit.config import DualConfig, ModelConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tiny_cfg(**kw) -> ModelConfig:
    """Width-16 model small enough for float64 gradient checks."""
    base = ModelConfig(depth=3, width=16, heads=2, mlp_hidden=12, patch=4, image=8, channels=3,
                       num_classes=3, cond_mode="registers", n_reg=2, reg_start=1, reg_end=1,
                       lora_rank=4, freq_dim=16)
    return replace(base, **kw)


def dual(mode, *components) -> DualConfig:
    return DualConfig(mode, frozenset(components))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
