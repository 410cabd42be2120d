from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorda.factorworld import (
    CATEGORICAL,
    CONTINUOUS,
    DEFAULT_WORLD,
    Factor,
    FactorError,
    FactorSchema,
    FixtureError,
    LEFT_MARKER_MODES,
    RenderParams,
    Scene,
    fixture_marginals,
    load_accuracy_fixture,
    make_schema,
    make_world,
    marker_glyph,
    region_masks,
    render_scene,
    sample_domain,
    split_train_test,
)
from factorda.fpda import grouping_from_factor

SCHEMA = make_schema()
BALANCED = {"side_class_skew": 0.0, "chunk": 10}


def scene(**over):
    v = {
        "class": 2, "object": 2, "marker": 2, "marker_side": "R", "background": "checker-blue",
        "brightness": 0.8, "pose_dx": 0, "pose_dy": 1, "tint": 0.9,
    }
    v.update(over)
    return Scene(v, seed=99)


# ------------------------------------------------------------------ schema


def test_schema_invariants():
    with pytest.raises(FactorError):
        FactorSchema((Factor("x", CATEGORICAL, (0, 1)),))
    with pytest.raises(FactorError):
        FactorSchema((Factor("class", CATEGORICAL, (0, 1), domain=True, informative=True),))
    with pytest.raises(FactorError):
        FactorSchema((Factor("class", CATEGORICAL, (0,), informative=True), Factor("g", CONTINUOUS, domain=True)))
    with pytest.raises(FactorError):
        Factor("c", CATEGORICAL)
    assert {f.name for f in SCHEMA.domain_factors} == {"marker_side", "background", "brightness"}
    assert SCHEMA["marker_side"].informative


def test_validate_rejects_bad_values():
    with pytest.raises(FactorError):
        render_scene(SCHEMA, scene(marker_side="U"))
    with pytest.raises(FactorError):
        render_scene(SCHEMA, scene(tint=3.0))
    v = dict(scene().values)
    del v["tint"]
    with pytest.raises(FactorError):
        render_scene(SCHEMA, Scene(v, 0))


# ------------------------------------------------------------------ render


def test_render_deterministic_and_clamped():
    a = render_scene(SCHEMA, scene())
    b = render_scene(SCHEMA, scene())
    assert a.shape == (3, 16, 16)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


@pytest.mark.parametrize("side", ["L", "R"])
def test_background_change_leaves_glyph_regions(side):
    s1 = scene(marker_side=side, background="checker-blue")
    s2 = scene(marker_side=side, background="hstripes-red")
    a, b = render_scene(SCHEMA, s1), render_scene(SCHEMA, s2)
    obj, mark = region_masks(SCHEMA, s1, 16)
    keep = obj | mark
    assert np.array_equal(a[:, keep], b[:, keep])
    assert not np.array_equal(a[:, ~keep], b[:, ~keep])


def test_brightness_doubling_doubles_clean_pixels():
    a = render_scene(SCHEMA, scene(brightness=0.5), add_noise=False, clip=False)
    b = render_scene(SCHEMA, scene(brightness=1.0), add_noise=False, clip=False)
    np.testing.assert_allclose(b, 2.0 * a, rtol=1e-15)


def test_marker_side_moves_marker():
    _, mark_r = region_masks(SCHEMA, scene(marker_side="R"), 16)
    _, mark_l = region_masks(SCHEMA, scene(marker_side="L"), 16)
    assert not np.any(mark_r & mark_l)


@pytest.mark.parametrize("mode", LEFT_MARKER_MODES)
def test_left_marker_modes_keep_classes_distinct(mode):
    glyphs = [marker_glyph(c, "L", mode).tobytes() for c in range(5)]
    assert len(set(glyphs)) == 5
    if mode == "same":
        assert all(np.array_equal(marker_glyph(c, "L", mode), marker_glyph(c, "R", mode)) for c in range(5))
    else:
        right = {marker_glyph(c, "R").tobytes() for c in range(5)}
        assert not right & set(glyphs)


def test_small_image_rejected():
    with pytest.raises(FactorError):
        render_scene(SCHEMA, scene(), RenderParams(image_size=12))


# ------------------------------------------------------------------- world


def test_default_world_shape():
    w = make_world()
    assert w.domain_ids == (1, 2, 3, 4)
    groups = grouping_from_factor(w.domains, "marker_side").groups()
    assert {frozenset(g) for g in groups.values()} == {frozenset({1, 4}), frozenset({2, 3})}
    assert len({d["background"] for d in w.domains}) == 4


def test_one_domain_world_is_valid():
    w = make_world({"domains": [{"id": 7, "marker_side": "L", "background": "plain-grey", "brightness": 1.0}]})
    assert w.domain_ids == (7,)


def test_world_errors():
    d = {"id": 1, "marker_side": "R", "background": "plain-grey", "brightness": 1.0}
    with pytest.raises(FactorError, match="share all domain-factor values"):
        make_world({"domains": [d, dict(d, id=2)]})
    with pytest.raises(FactorError, match="varies within domain"):
        make_world({"domains": [dict(d, marker_side=["L", "R"])]})
    with pytest.raises(FactorError, match="lacks a value"):
        make_world({"domains": [{"id": 1, "marker_side": "R", "background": "plain-grey"}]})
    with pytest.raises(FactorError, match="not domain factors"):
        make_world({"domains": [dict(d, pose_dx=0)]})
    with pytest.raises(FactorError, match="unknown world keys"):
        make_world({"colour": 1})
    with pytest.raises(FactorError):
        make_world({"object_reliability": 1.5})
    with pytest.raises(FactorError):
        make_world({"side_class_skew": 1.0})


# ---------------------------------------------------------------- sampling


def test_sample_domain_balanced_counts():
    w = make_world(BALANCED)
    ds = sample_domain(w, w.domain(2), 20, np.random.default_rng(0))
    assert len(ds) == 100
    assert np.bincount(ds.labels).tolist() == [20] * 5
    assert set(ds.domains.tolist()) == {2}


def test_sample_domain_reproducible():
    w = make_world(BALANCED)
    a = sample_domain(w, w.domain(1), 4, np.random.default_rng(5))
    b = sample_domain(w, w.domain(1), 4, np.random.default_rng(5))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_domain_factors_constant_within_sample():
    w = make_world()
    spec = w.domain(3)
    ds = sample_domain(w, spec, 10, np.random.default_rng(1))
    for f in w.schema.domain_factors:
        assert {s.values[f.name] for s in ds.scenes} == {spec[f.name]}


def test_side_skew_tilts_opposite_directions():
    w = make_world({"side_class_skew": 0.5, "chunk": 5})
    right, left = w.class_counts(w.domain(1), 40), w.class_counts(w.domain(2), 40)
    assert right == [20, 30, 40, 50, 60]
    assert left == right[::-1]
    ds = sample_domain(w, w.domain(2), 40, np.random.default_rng(0))
    assert np.bincount(ds.labels).tolist() == left


def test_reliabilities_control_cue_agreement():
    w = make_world({**BALANCED, "object_reliability": 1.0, "marker_reliability": 0.0})
    ds = sample_domain(w, w.domain(1), 10, np.random.default_rng(2))
    assert all(s.values["object"] == s.values["class"] for s in ds.scenes)
    assert all(s.values["marker"] != s.values["class"] for s in ds.scenes)


# ------------------------------------------------------------------- split


def test_split_examples():
    w = make_world(BALANCED)
    ds = sample_domain(w, w.domain(1), 40, np.random.default_rng(0))
    tr, te = split_train_test(ds, 20)
    assert np.bincount(tr.labels).tolist() == [20] * 5 and np.bincount(te.labels).tolist() == [20] * 5
    tr1, te1 = split_train_test(ds, 1)
    order = [s.seed for s, y in zip(ds.scenes, ds.labels) if y == 0]
    assert [s.seed for s, y in zip(tr1.scenes, tr1.labels) if y == 0] == order[0::2]
    assert [s.seed for s, y in zip(te1.scenes, te1.labels) if y == 0] == order[1::2]
    with pytest.raises(ValueError):
        split_train_test(ds, 3)


@given(st.sampled_from([1, 2, 5, 10]))
def test_split_partitions(chunk):
    w = make_world(BALANCED)
    ds = sample_domain(w, w.domain(4), 20, np.random.default_rng(3))
    tr, te = split_train_test(ds, chunk)
    key = lambda d: {s.seed for s in d.scenes}
    assert not key(tr) & key(te)
    assert key(tr) | key(te) == key(ds)
    # strict alternation of chunks inside each class
    seeds0 = [s.seed for s, y in zip(ds.scenes, ds.labels) if y == 0]
    in_train = [sd in key(tr) for sd in seeds0]
    assert in_train == [(k // chunk) % 2 == 0 for k in range(len(seeds0))]


# ----------------------------------------------------------------- fixture


def test_fixture_entries():
    fx = load_accuracy_fixture()
    assert fx.domain_ids == tuple(range(1, 12))
    assert fx.accuracy(1, 2) == 0.67
    assert fx.accuracy(10, 4) == 0.81
    assert fx.accuracy(9, 6) == 0.30
    with pytest.raises(KeyError):
        fx.accuracy(3, 3)


def test_fixture_marginals():
    marg = fixture_marginals(load_accuracy_fixture())
    assert marg["row_avg"][10] == pytest.approx(0.69, abs=0.005)
    assert marg["col_max"][1] == pytest.approx(0.83, abs=0.005)


@pytest.mark.parametrize(
    "body, match",
    [
        ("1,2,0.5\n1,3,abc\n", "row 3"),
        ("1,2,0.5\n2,1,1.7\n", "row 3"),
        ("1,2,0.5\n2,1\n", "row 3"),
        ("1,1,0.5\n", "row 2"),
        ("1,2,0.5\n1,2,0.6\n", "row 3"),
        ("1,2,0.5\n", "full"),
    ],
)
def test_fixture_errors_name_rows(tmp_path, body, match):
    p = tmp_path / "fx.csv"
    p.write_text("source,target,accuracy\n" + body)
    with pytest.raises(FixtureError, match=match):
        load_accuracy_fixture(p)


def test_fixture_bad_header(tmp_path):
    p = tmp_path / "fx.csv"
    p.write_text("a,b,c\n1,2,0.5\n")
    with pytest.raises(FixtureError, match="row 1"):
        load_accuracy_fixture(p)


def test_default_world_keys_accepted():
    assert make_world(DEFAULT_WORLD).domain_ids == (1, 2, 3, 4)
