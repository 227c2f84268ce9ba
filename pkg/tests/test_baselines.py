"""Reference engines must produce serializable schedules in the shared
result shape, and their abort accounting must behave as designed."""

import pytest

from thunderbolt.baselines import run_occ, run_tpl_nowait
from thunderbolt.workload import SmallBankSpec, generate, initial_state, oracle_check

from tests.test_executor import bank_batch, random_scripts


ENGINES = {"occ": run_occ, "tpl": run_tpl_nowait}


def check(result, txs, snapshot):
    problems = oracle_check(result.order, txs, result.reads, result.writes,
                            result.results, snapshot)
    assert problems == [], "\n".join(problems)


@pytest.mark.parametrize("name", ENGINES)
@pytest.mark.parametrize("seed", range(5))
def test_engines_match_serial_oracle(name, seed):
    txs, state = bank_batch(seed, n_accounts=8, n_txs=50, pr=0.3)
    result = ENGINES[name](txs, state, workers=6, seed=seed)
    assert len(result.order) == len(txs)
    check(result, txs, state)


@pytest.mark.parametrize("name", ENGINES)
def test_single_worker_commits_in_arrival_order(name):
    txs, state = bank_batch(seed=2, n_txs=20)
    result = ENGINES[name](txs, state, workers=1, seed=0)
    assert list(result.order) == [tx.digest for tx in txs]
    assert result.reexec_count == 0


@pytest.mark.parametrize("name", ENGINES)
def test_contention_causes_aborts(name):
    txs, state = bank_batch(seed=4, n_accounts=2, n_txs=40, pr=0.0)
    result = ENGINES[name](txs, state, workers=8, seed=4)
    assert result.reexec_count > 0
    check(result, txs, state)


@pytest.mark.parametrize("name", ENGINES)
def test_threaded_mode_is_serializable(name):
    txs, state = bank_batch(seed=6, n_accounts=6, n_txs=60, pr=0.2)
    result = ENGINES[name](txs, state, workers=4, threaded=True)
    assert len(result.order) == len(txs)
    check(result, txs, state)


@pytest.mark.parametrize("name", ENGINES)
@pytest.mark.parametrize("seed", range(6))
def test_blind_write_scripts_stay_serializable(name, seed):
    txs = random_scripts(seed, n_txs=15, keys="ABC")
    snapshot = {"A": 0, "B": 0, "C": 0}
    result = ENGINES[name](txs, snapshot, workers=6, seed=seed)
    check(result, txs, snapshot)
