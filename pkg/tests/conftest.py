from __future__ import annotations

import functools

import pytest
import torch

from moe_planner.scene import TOPOLOGIES, GeneratorConfig, generate_scenario

torch.set_num_threads(1)


@functools.lru_cache(maxsize=None)
def scenario(topology: str, seed: int):
    return generate_scenario(GeneratorConfig(topology=topology), seed)


def mixed_corpus(start: int, count: int) -> list:
    """Round-robin over topologies, seeds start..start+count-1."""
    return [scenario(TOPOLOGIES[i % len(TOPOLOGIES)], start + i) for i in range(count)]


@pytest.fixture(scope="session")
def small_corpus():
    return mixed_corpus(500, 8)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(name: str, ok: bool | str | None, detail: str) -> None:
    tag = {True: "PASS", False: "FAIL", None: "INFO"}.get(ok, str(ok))
    line = f"[{tag}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
