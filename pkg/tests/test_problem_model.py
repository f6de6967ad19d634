import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from openloop_lq import SpecError
from openloop_lq.problem_model import (
    CoefficientProvider,
    ControlTrajectory,
    Modulation,
    TimeGrid,
    coefficients_at,
    load_spec,
    make_spec,
    random_spec,
    spec_to_dict,
    validate,
)

from conftest import benchmark, random_a


def zero_spec(n=2, m=1, steps=10):
    z = lambda r, c: np.zeros((r, c))
    return make_spec(z(n, n), z(n, m), z(n, n), z(n, m), z(n, n), z(m, m), z(n, n), np.zeros(n), steps=steps)


class TestTimeGrid:
    def test_uniform_spacing(self):
        g = TimeGrid(1.3, 7)
        assert np.allclose(np.diff(g.nodes), g.dt, rtol=0, atol=1e-15)
        assert g.nodes[-1] == 1.3 and g.t(7) == 1.3

    @pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (1.0, 0), (float("inf"), 3)])
    def test_bad_grid(self, T, N):
        with pytest.raises(SpecError):
            TimeGrid(T, N)


class TestValidate:
    def test_negative_R(self):
        spec = make_spec(0, 1, 0, 0, 0, -1, 1, 1)
        rep = validate(spec)
        assert not rep.ok
        assert any("R not PSD" in msg for msg in rep.messages())

    def test_zero_spec_is_valid(self):
        assert len(validate(zero_spec())) == 0

    def test_dimension_mismatch(self):
        n, m = 2, 1
        spec = make_spec(np.eye(n), np.ones((n, m + 1)), np.eye(n), np.ones((n, m)), np.eye(n),
                         np.eye(m), np.eye(n), np.ones(n))
        assert any("dimension mismatch" in msg for msg in validate(spec).messages())

    def test_asymmetric_Q(self):
        spec = make_spec(np.eye(2), np.ones((2, 1)), np.eye(2), np.ones((2, 1)),
                         [[1, 0.5], [0, 1]], 1, np.eye(2), [1, 1])
        assert any("Q not symmetric" in msg for msg in validate(spec).messages())

    def test_weight_modulation_must_be_bounded(self):
        spec = make_spec(0, 1, 0, 0, 1, 1, 1, 1, modulations={"R": Modulation("tanh", 1.5)})
        assert any("|gain| < 1" in msg for msg in validate(spec).messages())

    def test_modes(self):
        noisy = benchmark(x0_cov=[[1.0]])
        assert validate(noisy, "det").ok
        assert not validate(noisy, "random").ok
        assert not validate(random_a(), "det").ok
        assert validate(random_a(), "random").ok

    def test_idempotent(self):
        spec = make_spec(0, 1, 0, 0, -1, -1, 1, 1)
        assert validate(spec).messages() == validate(spec).messages()

    def test_raise(self):
        with pytest.raises(SpecError) as exc:
            validate(make_spec(0, 1, 0, 0, 0, -1, 1, 1)).raise_if_invalid()
        assert exc.value.violations


class TestCoefficients:
    def test_constant_provider(self):
        spec = make_spec(2, 1, 0, 0, 0, 1, 1, 1)
        for t, w in [(0.0, 0.0), (0.4, -3.0), (1.0, 7.5)]:
            assert np.array_equal(coefficients_at(spec, t, w).A, [[2.0]])

    def test_tanh_at_zero(self):
        spec = make_spec(0, 1, 0, 0, 0, 1, 1, 1, modulations={"A": Modulation("tanh", 1.0, 1.0)})
        assert np.array_equal(coefficients_at(spec, 0.3, 0.0).A, [[0.0]])

    def test_multiplier_saturates(self):
        spec = make_spec(0, 1, 0, 0, 1, 1, 1, 1, modulations={"Q": Modulation("tanh", 0.5, 1.0)})
        assert np.allclose(coefficients_at(spec, 0.5, 1e3).Q, [[1.5]])

    @pytest.mark.parametrize("kind,w,expect", [("sin", np.pi / 2, 1.0), ("clamp", 5.0, 1.0),
                                                ("identity-clamped", -0.25, -0.25)])
    def test_kinds(self, kind, w, expect):
        assert Modulation(kind, 1.0).phi(w) == pytest.approx(expect)

    def test_batched_w(self):
        c = coefficients_at(random_a(), 0.5, np.linspace(-1, 1, 5))
        assert c.A.shape == (5, 1, 1)
        assert np.allclose(c.A[:, 0, 0], 0.2 + 0.5 * np.tanh(np.linspace(-1, 1, 5)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            coefficients_at(benchmark(), 1.5)

    def test_piecewise_left_limit(self):
        prov = CoefficientProvider(np.array([[[1.0]], [[2.0]]]))
        assert prov.evaluate(0.5, 0.0, 1.0)[0, 0] == 2.0
        assert prov.evaluate(0.5, 0.0, 1.0, from_left=True)[0, 0] == 1.0
        assert prov.evaluate(1.0, 0.0, 1.0)[0, 0] == 2.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), t=st.floats(0, 1), w=st.floats(-5, 5))
    def test_deterministic_constant_in_w(self, seed, t, w):
        spec = random_spec(np.random.default_rng(seed), 2, 2)
        a, b = coefficients_at(spec, t, 0.0), coefficients_at(spec, t, w)
        for name in "ABCDQR":
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert b.check() == []

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), t=st.floats(0, 1), w=st.floats(-5, 5))
    def test_modulated_sets_stay_valid(self, seed, t, w):
        spec = random_spec(np.random.default_rng(seed), 2, 2, random_coefficients=True)
        assert validate(spec).ok
        assert coefficients_at(spec, t, w).check() == []


class TestJson:
    def test_roundtrip(self, tmp_path):
        spec = random_spec(np.random.default_rng(2), 2, 1, random_coefficients=True)
        path = tmp_path / "s.json"
        path.write_text(json.dumps(spec_to_dict(spec)))
        back = load_spec(path)
        for t, w in [(0.0, 0.3), (0.7, -1.2)]:
            a, b = coefficients_at(spec, t, w), coefficients_at(back, t, w)
            assert all(np.array_equal(getattr(a, k), getattr(b, k)) for k in "ABCDQR")
        assert np.array_equal(back.x0_mean, spec.x0_mean)

    def test_missing_field(self):
        with pytest.raises(SpecError, match="missing"):
            load_spec({"n": 1, "m": 1, "T": 1, "steps": 4, "coefficients": {}})

    def test_bad_json(self):
        with pytest.raises(SpecError):
            load_spec("{not json")


def test_control_trajectory_arithmetic():
    g = TimeGrid(1.0, 4)
    u = ControlTrajectory.from_function(g, lambda t: [t, 1.0])
    v = 2 * u + ControlTrajectory.zeros(g, 2)
    assert v.values.shape == (4, 2)
    assert np.allclose(v.values[:, 0], 2 * g.nodes[:-1])
    with pytest.raises(SpecError):
        ControlTrajectory(g, np.zeros((3, 1)))
