from __future__ import annotations

import pytest
import torch

from fertransfer.model import DecoderConfig, EncoderConfig, ModelConfig, build_model
from fertransfer.preprocess import PreprocessConfig

TOY_PREPROCESS = PreprocessConfig(resize=48, height=64)

_acceptance_lines: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name}"
    if detail:
        line += f" ({detail})"
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_preprocess() -> PreprocessConfig:
    return TOY_PREPROCESS


def small_config(embed_dim=16, num_layers=2, num_groups=7, image_size=(32, 32), patch=8) -> ModelConfig:
    return ModelConfig(
        EncoderConfig(image_size=image_size, patch_size=patch, embed_dim=embed_dim,
                      num_layers=num_layers, num_heads=2),
        DecoderConfig(num_groups=num_groups, ffn_hidden=2 * embed_dim, num_heads=2),
    )


@pytest.fixture
def toy_model_double():
    model = build_model(small_config(), seed=0).double()
    return model.eval()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
