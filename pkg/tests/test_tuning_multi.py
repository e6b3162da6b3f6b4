import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from lrtune.gp import autodiff as ad
from lrtune.tasks import RunnerConfig, make_task_family, run_schedule
from lrtune.tuning_multi import (MultiTuneConfig, estimate_new_task_embedding, expected_reduced_J, latin_hypercube,
                                 run_multi_tuning, sample_hull, select_next_run, ucb_maximizer, uncertainty_J,
                                 universal_schedule, variance_ratio, warm_start_schedule)


def small_config(**kw):
    base = dict(N0=3, N=5, d=2, total_steps=200, num_inducing=15, n_mc=32, n_mc_J=32, n_outer=4, n_inner=8,
                n_starts=2, grad_iters=2, grid_points=17, fit_steps=120, refit_steps=40, n_hull=16,
                runner=RunnerConfig(record_every=25), seed=1)
    base.update(kw)
    return MultiTuneConfig(**base)


def in_hull(W, p):
    M = len(W)
    A = np.vstack([W.T, np.ones(M)])
    res = linprog(np.zeros(M), A_eq=A, b_eq=np.append(p, 1.0), bounds=[(0, None)] * M)
    return res.status == 0


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3))
def test_hull_samples_lie_in_the_hull(seed, M, L):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((M, L))
    pts = sample_hull(W, 20, rng)
    assert pts.shape == (20, L)
    assert all(in_hull(W, p) for p in pts[:5])


@given(st.integers(2, 40), st.integers(1, 5), st.integers(0, 1000))
def test_latin_hypercube_is_stratified(n, d, seed):
    X = latin_hypercube(n, d, seed)
    assert X.shape == (n, d)
    for j in range(d):
        assert sorted(np.floor(X[:, j] * n).astype(int)) == list(range(n))


def test_config_validation():
    for bad in [dict(alpha=0.5), dict(alpha_rec=1.0), dict(N0=5, N=5), dict(L=0)]:
        with pytest.raises(ValueError):
            MultiTuneConfig(**bad)


@pytest.fixture(scope="module")
def multi():
    tasks = make_task_family(0, 2, 0.5, dim=4)
    seen = []
    res = run_multi_tuning(tasks, small_config(), callback=lambda r, m, refs, J: seen.append((r, J)))
    return tasks, res, seen


def test_multi_run_budget_and_outputs(multi):
    tasks, res, seen = multi
    cfg = small_config()
    runs = [r for r in res.log if "run" in r]
    assert len(runs) == cfg.N and len(res.traces) == cfg.N
    assert set(res.recommended) == {t.task_id for t in tasks}
    for s in res.recommended.values():
        assert s.d == cfg.d and all(0 <= v <= 1 for v in s.values)
    assert np.asarray(ad.value(res.model.embedding)).shape == (2, cfg.L)
    assert len(res.J_history) == len(seen) == cfg.N - cfg.N0


def test_multi_run_is_deterministic(multi):
    tasks, res, _ = multi
    again = run_multi_tuning(tasks, small_config())
    assert {k: s.values for k, s in again.recommended.items()} == {k: s.values for k, s in res.recommended.items()}


def test_expected_reduced_J_does_not_exceed_J(multi):
    _, res, _ = multi
    cfg = small_config()
    model = res.model
    refs = [ucb_maximizer(model, j, cfg.alpha, np.random.default_rng(j), cfg) for j in range(2)]
    J, se_J = uncertainty_J(model, refs, 256, np.random.default_rng(5), cfg.schedule(), return_stderr=True)
    assert J >= 0
    for x in ([0.2, 0.8], [0.6, 0.4]):
        Jbar, se = expected_reduced_J(model, np.array(x), 0, refs, 8, 32, np.random.default_rng(6), cfg.schedule(),
                                      return_stderr=True)
        assert float(ad.value(Jbar)) <= J + 3 * np.hypot(se, se_J)


def test_select_next_run_returns_a_valid_choice(multi):
    _, res, _ = multi
    cfg = small_config()
    refs = [ucb_maximizer(res.model, j, cfg.alpha, np.random.default_rng(j), cfg) for j in range(2)]
    sel = select_next_run(res.model, refs, cfg, np.random.default_rng(0))
    assert sel.task_index in (0, 1) and set(sel.per_task) == {0, 1}
    assert np.all((sel.x >= 0) & (sel.x <= 1)) and len(sel.x) == cfg.d


def test_variance_ratio_in_unit_interval(multi):
    _, res, _ = multi
    cfg = small_config()
    W = sample_hull(np.asarray(ad.value(res.model.embedding)), 8, np.random.default_rng(0))
    r, tot = variance_ratio(res.model, [0.3, 0.7], W, 16, 0, cfg.schedule())
    assert r.shape == tot.shape == (4,)
    assert np.all((r >= 0) & (r <= 1)) and np.all(tot >= 0)


def test_warm_start_pieces(multi):
    tasks, res, _ = multi
    cfg = small_config()
    u = universal_schedule(res.model, cfg, np.random.default_rng(0))
    assert u.shape == (cfg.d,)
    x, score = warm_start_schedule(res.model, 1, cfg, np.random.default_rng(0), n_w=4, n_traj=8, n_candidates=4)
    assert x.shape == (1,) and 0 <= score <= 2
    with pytest.raises(ValueError):
        warm_start_schedule(res.model, 0, cfg, np.random.default_rng(0))
    tr = run_schedule(tasks[1], cfg.schedule([0.5, 0.5]), cfg.runner, np.random.default_rng(3))
    est = estimate_new_task_embedding(res.model, [tr], np.random.default_rng(0), steps=20)
    assert est.task_index == 2 and est.w.shape == (cfg.L,)
    assert est.elbo >= max(est.start_elbos) - 1e-9
    assert np.asarray(ad.value(est.model.embedding)).shape == (3, cfg.L)


def test_single_task_run():
    tasks = make_task_family(1, 1, 0.5, dim=4)
    res = run_multi_tuning(tasks, small_config(N0=2, N=3))
    assert list(res.recommended) == ["quad0"]
