import pytest

from hive_retrieval import synthbench
from hive_retrieval.experiments import dataset_from_benchmark

SMALL = synthbench.SynthSpec(seed=3, n_docs=400, n_queries=24, dim=64, vocab_size=600)


@pytest.fixture(scope="session")
def small_bench():
    return synthbench.generate(SMALL)


@pytest.fixture(scope="session")
def small_dataset(small_bench):
    return dataset_from_benchmark(small_bench)


@pytest.fixture(scope="session")
def small_bench_dir(small_bench, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    synthbench.write_benchmark(small_bench, out)
    return out


# --- acceptance summary -----------------------------------------------------

def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the terminal summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        request.config.acceptance_lines.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
