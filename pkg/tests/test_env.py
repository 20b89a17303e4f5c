import math

import numpy as np
import pytest

from envqueue.builtins import BUILTINS, build, catalog
from envqueue.env import (Beta, DiffusionEnvSpec, Domain, RateField, Threshold, default_diffusion,
                          diffusion_spec_from_dict, eval_rates, validate_spec)
from envqueue.errors import BoundViolation, DomainError, SpecError
from envqueue.fields import Field, affine, const, linear, pole, table


def test_field_kinds_evaluate():
    assert const(2.5)(0.3) == 2.5
    assert affine(1, 2, 3)((0.5, 0.25)) == pytest.approx(1 + 1 + 0.75)
    assert linear(1.0)(0.4) == pytest.approx(0.4)
    assert pole(0.25, 1.0)(0.5) == pytest.approx(0.5)
    t = table([0, 1, 2], [1.0, 3.0, 2.0])
    assert t(0.5) == pytest.approx(2.0)
    assert t(-1.0) == 1.0 and t(9.0) == 2.0  # flat outside the knots


def test_field_grid_matches_pointwise():
    f = affine(0.1, 0.7, -0.2)
    zs = np.array([[0.1, 0.2], [0.5, 0.9], [1.0, 0.0]])
    assert np.allclose(f.grid(zs), [f(z) for z in zs])
    g = pole(0.3, 1.0)
    assert g.grid(np.float64(0.2)).shape == ()
    assert np.allclose(g.grid(np.array([0.1, 0.2])), [g(0.1), g(0.2)])


def test_field_roundtrip_and_errors():
    for f in (const(1.0), affine(1, 2, 3), pole(0.2, 1.5, 1), table([0, 1], [2, 3])):
        assert Field.from_dict(f.to_dict()) == f
    with pytest.raises(SpecError):
        table([0, 0], [1, 2])
    with pytest.raises(SpecError):
        Field("spline", (1.0,))
    big = table(np.arange(40.0), np.ones(40))
    assert big(3.0) == 1.0
    with pytest.raises(SpecError):
        big.encode()


def test_interval_and_ray_faces():
    d = Domain("interval", 0.0, 2.0)
    n, c = d.faces()
    assert np.allclose(n, [[1.0], [-1.0]]) and np.allclose(c, [0.0, -2.0])
    assert d.contains(1.0) and not d.contains(2.5)
    assert Domain("ray", 1.5, 6.0).face_names == ("lower", "cap")
    with pytest.raises(SpecError):
        Domain("interval", 1.0, 1.0)


def test_cone_faces_with_and_without_base():
    d = Domain("cone", 0.0, 2.0, 0.2)
    assert d.face_names == ("floor", "slope", "cap")
    base = Domain("cone", 0.5, 2.0, 0.2)
    assert base.face_names == ("floor", "slope", "cap", "base")
    assert base.contains((1.0, 0.5)) and not base.contains((0.4, 0.1))
    assert not base.contains((1.0, 0.81))  # above the slope (1 - delta) z1
    n, _ = base.faces()
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)
    pts = base.sample(200, np.random.default_rng(0))
    assert all(base.contains(p) for p in pts)


def test_eval_rates_envelope():
    rf = RateField(linear(1.0), const(1.0), 0.9, 1.0)
    assert eval_rates(rf, 0.5) == pytest.approx((0.5, 1.0, 0.5))
    with pytest.raises(BoundViolation):
        eval_rates(rf, 0.95)
    with pytest.raises(DomainError):
        eval_rates(rf, 0.95, Domain("interval", 0.0, 0.9))


def test_beta_geometric_extension():
    b = Beta((1.0, 2.0), ratio=3.0)
    assert b(0) == 1.0 and b(1) == 2.0
    assert b(3) == pytest.approx(2.0 * 9.0)
    with pytest.raises(SpecError):
        Beta((0.0,))


def test_threshold_levels():
    t = Threshold(((0.0, 0.9), (0.0, 0.9), (0.0, 0.75)))
    assert t.n0 == 2
    assert t.interval(1) == (0.0, 0.9) and t.interval(7) == (0.0, 0.75)
    with pytest.raises(SpecError):
        DiffusionEnvSpec(Domain("interval", 0.0, 0.9), (const(0.0),), default_diffusion(1),
                         RateField(linear(1.0), const(1.0), 0.9, 1.0), threshold=Threshold(((0.0, 1.2),)))


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_validate(name):
    rep = validate_spec(build(name))
    assert rep.ok, [c.name for c in rep.failures()]


def test_validation_flags_bad_specs():
    # rho reaches 1 at the right end: the normalizer diverges
    s = build("case-a-rbm-arrival", z_max=1.0)
    rep = validate_spec(s)
    assert not rep.ok
    # the drift toward 1 is not integrable when the cap is at the pole
    bad = DiffusionEnvSpec(Domain("interval", 0.0, 1.0), (pole(0.75, 1.0),), default_diffusion(1),
                           RateField(linear(1.0), const(1.0), 1.0, 1.0))
    assert not validate_spec(bad).ok


def test_builtin_parameters_are_checked():
    with pytest.raises(SpecError):
        build("two-state", nonsense=1)
    with pytest.raises(SpecError):
        build("no-such-model")
    names = {b["name"] for b in catalog()}
    assert {"ex3.1-theta-drift", "case-a-rbm-arrival", "ex2.1-cyclic"} <= names


@pytest.mark.parametrize("name", ["case-a-rbm-arrival", "case-c-cone", "ex3.2-threshold", "rbm-uniform-jumps"])
def test_diffusion_spec_dict_roundtrip(name):
    s = build(name)
    assert diffusion_spec_from_dict(s.to_dict(), s.name).to_dict() == s.to_dict()


def test_diffusion_spec_from_dict_rejects_missing_parts():
    with pytest.raises(SpecError):
        diffusion_spec_from_dict({"domain": {"kind": "interval", "hi": 1.0}})


def test_discrete_spec_rates():
    s = build("two-state")
    assert np.allclose(s.rho(), [0.2, 0.5])
    assert s.m == 2
    assert math.isclose(s.rates.lambda_bar, 0.5)
