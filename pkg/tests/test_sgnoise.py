import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from thinflow import avgops as ao
from thinflow import staggered as stg
from thinflow.grid import VField2D, make_grid2d
from thinflow.sgnoise import (MAX_MODES, ForcingError, check_coupling, hs_norm2, make_forcing,
                              make_paths, mode_from_descriptor, n_steps_for, stack_paths,
                              stochastic_increment, trig_mode)

EPS = [0.25, 0.125, 0.0625]


@pytest.fixture
def family():
    g = make_grid2d(12, 10, 1.0, 1.0)
    modes = [trig_mode(g, 1, 1, 0.2), trig_mode(g, 2, 1, 0.1), trig_mode(g, 1, 3, 0.05)]
    return make_forcing(modes, trig_mode(g, 1, 2, 0.3), EPS, nz=4, u0=trig_mode(g, 2, 2, 0.1))


def test_increment_variance_chi_square():
    dt = 0.01
    p = make_paths(4, dt, 40.0, 7)
    x = p.increments.ravel()
    n = x.size
    # (n - 1) s^2 / dt ~ chi2(n - 1): two-sided 99.9% acceptance region
    stat = (n - 1) * x.var(ddof=1) / dt
    lo, hi = stats.chi2.ppf([0.0005, 0.9995], n - 1)
    assert lo < stat < hi
    assert abs(x.mean()) < 4 * np.sqrt(dt / n)


def test_paths_deterministic_and_start_at_zero():
    a = make_paths(3, 0.01, 1.0, (11, 2))
    b = make_paths(3, 0.01, 1.0, (11, 2))
    c = make_paths(3, 0.01, 1.0, (11, 3))
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, c.increments)
    W = a.W()
    assert W.shape == (101, 3) and np.all(W[0] == 0)
    assert np.allclose(np.diff(W, axis=0), a.increments)
    assert stack_paths([a, c]).shape == (2, 100, 3)


def test_path_validation():
    with pytest.raises(ValueError):
        make_paths(MAX_MODES + 1, 0.1, 1.0, 0)
    with pytest.raises(ValueError):
        n_steps_for(0.3, 1.0)
    with pytest.raises(ValueError):
        stack_paths([make_paths(2, 0.1, 1.0, 0), make_paths(3, 0.1, 1.0, 0)])


def test_rejects_divergent_coefficient():
    g = make_grid2d(8, 8)
    rng = np.random.default_rng(0)
    bad = VField2D(*stg.enforce_bc(g.layout, [rng.standard_normal(g.layout.comp_shape(c))
                                              for c in range(2)]), g)
    with pytest.raises(ForcingError):
        make_forcing([trig_mode(g, 1, 1), bad], None, EPS)
    with pytest.raises(ForcingError):
        make_forcing([trig_mode(g, 1, 1), trig_mode(make_grid2d(6, 8), 1, 1)], None, EPS)


def test_trig_mode_is_divergence_free():
    g = make_grid2d(16, 12, 1.0, 0.5)
    v = trig_mode(g, 3, 2, 1.0)
    assert np.max(np.abs(stg.divergence(g.layout, v.components))) < 1e-11
    assert np.max(np.abs(v.u1)) > 0


def test_mode_descriptors(tmp_path):
    from thinflow.grid import dump_field
    g = make_grid2d(8, 8)
    t = mode_from_descriptor(g, {"type": "trig", "kx": 1, "ky": 2, "amplitude": 0.5})
    assert np.allclose(t.u1, trig_mode(g, 1, 2, 0.5).u1)
    b = mode_from_descriptor(g, {"type": "bump", "center": [0.5, 0.5], "radius": 0.3})
    assert np.max(np.abs(stg.divergence(g.layout, b.components))) < 1e-11
    dump_field(t, tmp_path, "field")
    d = mode_from_descriptor(g, {"type": "dump", "path": ".", "amplitude": 2.0}, base_dir=tmp_path)
    assert np.allclose(d.u1, 2 * t.u1)
    with pytest.raises(ForcingError):
        mode_from_descriptor(g, {"type": "nope"})


def test_lifts_and_hs_identity(family):
    h2 = hs_norm2(family)
    for eps in EPS:
        assert hs_norm2(family, eps) == pytest.approx(eps * h2, rel=1e-13)
        for g2, g3 in zip(family.g2d, family.lifts[eps]):
            back = ao.circ_m(g3)
            assert np.array_equal(back.u1, g2.u1) and np.all(g3.u3 == 0)


def test_same_increments_couple_all_thicknesses(family):
    paths = make_paths(family.n_modes, 0.01, 0.2, 5)
    for k in (0, 7, 19):
        x2 = stochastic_increment(family, paths, k)
        for eps in EPS:
            x3 = stochastic_increment(family, paths, k, eps)
            m = ao.circ_m(x3)
            assert np.max(np.abs(m.u1 - x2.u1)) <= 1e-15 and np.max(np.abs(m.u2 - x2.u2)) <= 1e-15
    assert check_coupling(family, paths.increments[3]) <= 1e-13
    with pytest.raises(IndexError):
        stochastic_increment(family, paths, paths.n_steps)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.sampled_from(EPS))
def test_noise_is_linear_in_increments(dw, eps):
    g = make_grid2d(6, 6)
    fam = make_forcing([trig_mode(g, 1, 1), trig_mode(g, 2, 1), trig_mode(g, 1, 2)], None, [eps])
    from thinflow.sgnoise import noise_field
    dw = np.asarray(dw)
    out = noise_field(fam.coefficient_stack(eps), dw)
    ref = sum(w * f.u1 for w, f in zip(dw, fam.lifts[eps]))
    assert np.allclose(out[0], ref, atol=1e-13)
    assert check_coupling(fam, dw) <= 1e-13
