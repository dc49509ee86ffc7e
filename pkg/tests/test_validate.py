import pytest

from gpmpc.validate import SUITES, run_suite


@pytest.mark.parametrize("suite", list(SUITES))
def test_quick_suite_passes(suite):
    results = run_suite(suite)
    failed = [f"{r.name}: {r.detail}" for r in results if not r.passed]
    assert not failed, failed


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("nope")
