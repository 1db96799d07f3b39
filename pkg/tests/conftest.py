import pytest

from wncs_lab import harness as hs

TINY = {"corpus": {"n_traces": 3, "n_steps": 800, "excitation_traces": 4},
        "fsmc": {"n_mc": 20000, "n_chains": 64},
        "run": {"n_runs": 2, "n_steps": 500}}


@pytest.fixture(scope="session")
def tiny_config():
    return hs.ExperimentConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_models(tiny_config):
    return hs.train_models(tiny_config)


@pytest.fixture(scope="session")
def tiny_experiment(tiny_config, tiny_models, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_experiment")
    return hs.run_experiment(tiny_config, out, models=tiny_models)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
