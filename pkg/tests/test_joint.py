import numpy as np
import pytest

from envqueue import joint
from envqueue.builtins import build
from envqueue.errors import BudgetExceeded, DomainError, ScaleOverflow, SpecError


@pytest.fixture(scope="module")
def case_a():
    return build("case-a-rbm-arrival")


@pytest.fixture(scope="module")
def env_only(case_a):
    return joint.simulate_joint(case_a, (0, 0.5), 200.0, 1e-3, seed=4, replicas=2, queue=False,
                                n_cap=3, z_bins=10)


def test_same_seed_same_path(case_a, env_only):
    again = joint.simulate_joint(case_a, (0, 0.5), 200.0, 1e-3, seed=4, replicas=2, queue=False,
                                 n_cap=3, z_bins=10, workers=2)
    assert np.array_equal(env_only.occ_in, again.occ_in)
    assert np.array_equal(env_only.ell, again.ell)
    other = joint.simulate_joint(case_a, (0, 0.5), 200.0, 1e-3, seed=5, replicas=2, queue=False,
                                 n_cap=3, z_bins=10)
    assert not np.array_equal(env_only.occ_in, other.occ_in)


def test_reflected_bm_is_uniform(env_only):
    s = joint.occupation_summary(env_only)
    assert s.layer_bins.sum() == pytest.approx(1.0) and s.tail == 0.0
    assert np.abs(s.layer_bins[0] - 0.1).max() < 0.01
    assert s.layer_bins[1:].sum() == 0.0


def test_boundary_local_time_rates(env_only):
    # uniform law on [0, 0.9] with unit variance: each end accrues 1 / (2 * 0.9) per unit time
    ell = joint.boundary_measure_estimate(env_only)[0]
    assert np.allclose(ell, 1 / 1.8, rtol=0.1)


def test_constant_rates_give_geometric_queue():
    s = build("rbm-uniform-jumps")
    p = joint.simulate_joint(s, (0, 0.5), 1500.0, 1e-3, seed=1, n_cap=8, z_bins=10, speed_cap=10)
    q = joint.occupation_summary(p).queue_marginal()
    ref = np.append(0.7 * 0.3 ** np.arange(9), 0.3**9)
    assert 0.5 * np.abs(q - ref).sum() < 0.03
    assert p.env_jumps > 0 and p.queue_events > 0


def test_threshold_freezes_environment():
    th = build("ex3.1-threshold")
    p = joint.simulate_joint_threshold(th, (0, 0.85), 100.0, 1e-3, seed=2, n_cap=8, z_bins=10, speed_cap=1e12)
    assert p.frozen_moves == 0
    s = joint.occupation_summary(p, restrict_active=True)
    assert s.outside > 0
    assert s.layer_bins.sum() + s.tail == pytest.approx(1.0)
    with pytest.raises(SpecError):
        joint.simulate_joint_threshold(build("case-a-rbm-arrival"), (0, 0.5), 1.0, 1e-3, seed=1)


def test_plain_scheme_overflows_where_adaptive_does_not(case_a):
    with pytest.raises(ScaleOverflow) as e:
        joint.simulate_joint(case_a, (120, 1e-3), 1.0, 1e-3, seed=1, adaptive=False, n_cap=10)
    assert e.value.n == 120
    p = joint.simulate_joint(case_a, (120, 1e-3), 1.0, 1e-3, seed=1, n_cap=10, speed_cap=1e3)
    assert p.steps >= 1000


def test_argument_errors(case_a):
    with pytest.raises(DomainError):
        joint.simulate_joint(case_a, (0, 0.95), 1.0, 1e-3, seed=1)
    with pytest.raises(SpecError):
        joint.simulate_joint(case_a, (0, 0.5), 1.0, 1e-3, seed=1, speed_cap=0.5)
    with pytest.raises(SpecError):
        joint.simulate_joint(case_a, (-1, 0.5), 1.0, 1e-3, seed=1)
    with pytest.raises(BudgetExceeded):
        joint.simulate_joint(case_a, (0, 0.5), 100.0, 1e-3, seed=1, max_steps=1000)


def test_summary_limits(env_only):
    with pytest.raises(SpecError):
        joint.occupation_summary(env_only, burn_frac=0.95)
    with pytest.raises(SpecError):
        joint.occupation_summary(env_only, z_bins=3)
    with pytest.raises(SpecError):
        joint.occupation_summary(env_only, n_cap=5)
    s = joint.occupation_summary(env_only, n_cap=1, z_bins=5, burn_frac=0.5)
    assert s.layer_bins.shape == (2, 5) and s.halves is not None


def test_burn_in_discards_early_time(case_a):
    p = joint.simulate_joint(case_a, (0, 0.5), 10.0, 1e-3, seed=1, queue=False, n_cap=2, z_bins=5, burn_in=4.0)
    # charging starts at the first step boundary past burn_in
    assert p.occ_in.sum() == pytest.approx(6.0, abs=1.5e-3)


def test_diffusive_coupling_trace(case_a):
    tr = joint.couple_joint_diffusive(case_a, (3, 0.1), (0, 0.8), seed=1)
    assert tr.coupled and tr.J == len(tr.phases) - 1
    assert tr.tau == pytest.approx(tr.decomposition(), rel=1e-9)
    with pytest.raises(SpecError):
        joint.couple_joint_batch(build("case-c-cone"), (0, (1, 0.1)), (0, (1, 0.2)), seed=1, n_runs=1)
