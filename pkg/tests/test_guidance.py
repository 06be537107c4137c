import numpy as np
import pytest

from draftflow import flowcore as fc
from draftflow import guidance as gd
from draftflow.errors import ConfigError, IncompleteBundleError


@pytest.fixture()
def net():
    return fc.init_model(8, (3, 3, 1), gd.cond_dim(), seed=0)


@pytest.fixture()
def bundle():
    rng = np.random.default_rng(1)
    return gd.ConditionBundle(
        p=rng.standard_normal(gd.PROMPT_DIM),
        vit=rng.standard_normal(gd.VIT_DIM),
        v=rng.standard_normal(gd.VERIFICATION_DIM),
    )


@pytest.fixture()
def x_t():
    return np.random.default_rng(2).standard_normal((3, 3, 1))


# ---------------------------------------------------------------------------
# bundles and null embeddings
# ---------------------------------------------------------------------------

def test_null_embedding_fixed_across_calls():
    a = gd.null_embedding("vit", gd.VIT_DIM)
    b = gd.null_embedding("vit", gd.VIT_DIM)
    assert a is b or np.array_equal(a, b)
    assert not np.all(a == 0.0)
    assert not a.flags.writeable


def test_null_embedding_identical_across_bundles(bundle):
    empty_a = gd.bundle_vector(bundle.keep(()), mode="uncond")
    empty_b = gd.bundle_vector(gd.ConditionBundle(), mode="uncond")
    assert np.array_equal(empty_a, empty_b)


def test_mode_inference():
    rng = np.random.default_rng(3)
    p = rng.standard_normal(gd.PROMPT_DIM)
    vit = rng.standard_normal(gd.VIT_DIM)
    assert gd.infer_mode(gd.ConditionBundle()) == "uncond"
    assert gd.infer_mode(gd.ConditionBundle(vit=vit)) == "draft_only"
    assert gd.infer_mode(gd.ConditionBundle(p=p)) == "full"
    assert gd.infer_mode(gd.ConditionBundle(p=p, vit=vit)) == "full"


def test_bundle_vector_layout(bundle):
    vec = gd.bundle_vector(bundle)
    assert vec.shape == (gd.cond_dim(),)
    # mode flag one-hot at the tail (full = index 2)
    assert list(vec[-gd.MODE_DIM:]) == [0.0, 0.0, 1.0]


def test_presence_is_explicit_not_value_based():
    # a zero vit vector is still "present": it must not be replaced by a null
    zero_vit = np.zeros(gd.VIT_DIM)
    vec = gd.bundle_vector(gd.ConditionBundle(vit=zero_vit))
    start = gd.PROMPT_DIM
    assert np.all(vec[start : start + gd.VIT_DIM] == 0.0)


# ---------------------------------------------------------------------------
# nested guidance
# ---------------------------------------------------------------------------

def test_nested_telescopes_to_full_pass(net, bundle, x_t):
    out = gd.nested_cfg(net, x_t, 0.5, bundle, 1.0, 1.0)
    full = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    assert np.max(np.abs(out - full)) < 1e-12


def test_nested_scale_zero_collapses_to_uncond(net, bundle, x_t):
    out = gd.nested_cfg(net, x_t, 0.5, bundle, 0.0, 0.0)
    uncond = fc.velocity(
        net, x_t, 0.5, gd.bundle_vector(bundle.keep(()), mode="uncond")
    )
    assert np.max(np.abs(out - uncond)) < 1e-12


def test_nested_matches_three_term_arithmetic(net, bundle, x_t):
    # the inference setting: draft scale 2, text scale 6
    s_draft, s_text = 2.0, 6.0
    u = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(()), mode="uncond"))
    d = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(("vit",))))
    f = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    want = u + s_draft * (d - u) + s_text * (f - d)
    got = gd.nested_cfg(net, x_t, 0.5, bundle, s_draft, s_text)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-14)


def test_nested_requires_vit_when_scale_live(net, x_t):
    no_vit = gd.ConditionBundle(p=np.zeros(gd.PROMPT_DIM))
    with pytest.raises(IncompleteBundleError):
        gd.nested_cfg(net, x_t, 0.5, no_vit, 2.0, 6.0)


def test_nested_affine_in_each_scale(net, bundle, x_t):
    """Output is affine in each scale; the slope is the context difference."""
    u = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(()), mode="uncond"))
    d = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(("vit",))))
    f = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    base = gd.nested_cfg(net, x_t, 0.5, bundle, 0.0, 3.0)
    for s in (-1.0, 0.5, 1.0, 2.0, 7.0):
        out = gd.nested_cfg(net, x_t, 0.5, bundle, s, 3.0)
        assert np.max(np.abs(out - (base + s * (d - u)))) < 1e-10
    base = gd.nested_cfg(net, x_t, 0.5, bundle, 2.0, 0.0)
    for s in (-1.0, 0.5, 1.0, 2.0, 7.0):
        out = gd.nested_cfg(net, x_t, 0.5, bundle, 2.0, s)
        assert np.max(np.abs(out - (base + s * (f - d)))) < 1e-10


# ---------------------------------------------------------------------------
# sequential / expanded guidance
# ---------------------------------------------------------------------------

def test_sequential_scale_zero_returns_full_pass(net, bundle, x_t):
    out = gd.sequential_cfg(net, x_t, 0.5, bundle, 0.0, 0.0)
    full = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    assert np.max(np.abs(out - full)) < 1e-12


def test_sequential_unit_scales_coefficients(net, bundle, x_t):
    # at scales (1, 1) the expansion is 4 M - 2 M_text - M_img
    m = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    m_text = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(("vit",))))
    m_img = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(("p",))))
    want = 4.0 * m - 2.0 * m_text - m_img
    got = gd.sequential_cfg(net, x_t, 0.5, bundle, 1.0, 1.0)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-13)


def test_expanded_coefficients_at_2_3():
    assert gd.expanded_coefficients(2.0, 3.0) == (12.0, -8.0, -3.0)


def test_expanded_reduces_to_text_only_cfg(net, bundle, x_t):
    out = gd.expanded_cfg(net, x_t, 0.5, bundle, 2.5, 0.0)
    m = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    m_text = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle.keep(("vit",))))
    assert np.allclose(out, m + 2.5 * (m - m_text), rtol=1e-12, atol=1e-13)


def test_sequential_equals_expanded_100_draws(net, bundle):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((3, 3, 1))
        t = float(rng.uniform())
        s_text, s_img = float(rng.uniform(0, 8)), float(rng.uniform(0, 8))
        a = gd.sequential_cfg(net, x, t, bundle, s_text, s_img)
        b = gd.expanded_cfg(net, x, t, bundle, s_text, s_img)
        rel = np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-6


def test_bagel_variants_require_full_bundle(net, x_t):
    partial = gd.ConditionBundle(p=np.zeros(gd.PROMPT_DIM))
    for fn in (gd.sequential_cfg, gd.expanded_cfg):
        with pytest.raises(IncompleteBundleError):
            fn(net, x_t, 0.5, partial, 1.0, 1.0)


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------

def test_guided_velocity_none_is_full_pass(net, bundle, x_t):
    spec = gd.GuidanceSpec("none", bundle)
    out = gd.guided_velocity(net, x_t, 0.5, spec)
    full = fc.velocity(net, x_t, 0.5, gd.bundle_vector(bundle))
    assert np.array_equal(out, full)


def test_guided_velocity_nested_unit_scales_equals_none(net, bundle, x_t):
    a = gd.guided_velocity(net, x_t, 0.5, gd.GuidanceSpec("none", bundle))
    b = gd.guided_velocity(
        net, x_t, 0.5, gd.GuidanceSpec("nested", bundle, s_draft=1.0, s_text=1.0)
    )
    assert np.max(np.abs(a - b)) < 1e-12


def test_nested_and_sequential_differ(net, bundle, x_t):
    """The two composition orders are genuinely different fields: on a fixed
    random net their outputs differ by a non-trivial relative margin."""
    a = gd.guided_velocity(
        net, x_t, 0.5, gd.GuidanceSpec("nested", bundle, s_draft=2.0, s_text=6.0)
    )
    b = gd.guided_velocity(
        net, x_t, 0.5, gd.GuidanceSpec("sequential", bundle, s_text=6.0, s_img=2.0)
    )
    rel = float(np.linalg.norm(a - b) / np.linalg.norm(b))
    assert rel > 1e-3


def test_unknown_variant_rejected(bundle):
    with pytest.raises(ConfigError):
        gd.GuidanceSpec("other", bundle)


def test_nonfinite_scale_rejected(bundle):
    with pytest.raises(ConfigError):
        gd.GuidanceSpec("nested", bundle, s_draft=float("nan"))


# ---------------------------------------------------------------------------
# evaluation counts
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "variant,kwargs,expected",
    [
        ("nested", dict(s_draft=2.0, s_text=6.0), 3),
        ("sequential", dict(s_text=2.0, s_img=3.0), 3),
        ("expanded", dict(s_text=2.0, s_img=3.0), 3),
        ("none", {}, 1),
    ],
)
def test_evaluation_counts(net, bundle, x_t, variant, kwargs, expected):
    net.eval_count = 0
    gd.guided_velocity(net, x_t, 0.5, gd.GuidanceSpec(variant, bundle, **kwargs))
    assert net.eval_count == expected
