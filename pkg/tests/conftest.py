import pytest

from cvcqa import data


@pytest.fixture(scope="session")
def default_cfg():
    return data.CorpusConfig()


@pytest.fixture(scope="session")
def vocab(default_cfg):
    return data.build_vocabulary(default_cfg)


@pytest.fixture(scope="session")
def corpus(default_cfg):
    return data.generate_corpus(default_cfg)


@pytest.fixture(scope="session")
def small_cfg():
    return data.CorpusConfig(n_train=120, n_dev=60, n_test=60, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    return data.generate_corpus(small_cfg)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
