import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpbandit.data import (RawScreen, filter_missing, load_prepared, load_screen, minmax_scale,
                           pca_project, prepare, save_prepared, screen_from_environment,
                           write_screen)
from fpbandit.core import make_synthetic_linear
from fpbandit.errors import ContractError, ParseError

NA = np.nan


def raw(expr, resp, fps=None, cells=None, drugs=None):
    resp = np.asarray(resp, dtype=float)
    n, k = resp.shape
    if fps is None:
        fps = (np.arange(k)[:, None] >> np.arange(4) & 1).astype(float)
    return RawScreen(expr, resp, fps, cells or [f"c{i + 1}" for i in range(n)],
                     drugs or [f"d{j + 1}" for j in range(k)])


def toy_screen():
    """8 cells x 5 drugs with a crafted missing pattern."""
    expr = [[4, 1, 5], [-4, 1, 5], [100, 7, 5], [2, -1, 5],
            [-2, -1, 5], [-50, 3, 5], [0, 0, 5], [0, 0, 5]]
    resp = [[0.1, 0.5, NA, 2.0, 1.0],
            [0.3, 0.7, 1.0, 4.0, 1.0],
            [NA, NA, NA, NA, 9.0],        # 80% missing: dropped
            [0.2, 0.6, 2.0, 3.0, 1.0],
            [NA, 0.9, NA, 5.0, 1.0],      # 40% missing: kept, knocks out d1 and d3
            [NA, NA, NA, NA, NA],
            [0.4, 0.1, 1.5, 6.0, 1.0],
            [0.5, 0.3, 2.5, 2.0, 1.0]]
    fps = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [1, 1, 0, 0], [0, 0, 0, 1]]
    return raw(expr, resp, fps)


def test_filter_fully_observed_unchanged(rng):
    r = raw(rng.random((4, 3)), rng.random((4, 3)))
    f = filter_missing(r)
    assert f.cell_ids == r.cell_ids and f.drug_ids == r.drug_ids
    assert np.array_equal(f.response, r.response)


def test_filter_drops_empty_cell(rng):
    resp = rng.random((4, 3))
    resp[2] = NA
    f = filter_missing(raw(rng.random((4, 2)), resp))
    assert f.cell_ids == ("c1", "c2", "c4") and f.drug_ids == ("d1", "d2", "d3")


def test_filter_five_by_four_enumeration(rng):
    resp = [[1, NA, 1, 1],      # 25%: kept, removes d2
            [NA, NA, NA, 1],    # 75%: dropped
            [1, 1, 1, 1],
            [NA, NA, 1, 1],     # 50%: kept, removes d1 and d2
            [1, 1, 1, NA]]      # 25%: kept, removes d4
    f = filter_missing(raw(rng.random((5, 2)), resp))
    assert f.cell_ids == ("c1", "c3", "c4", "c5")
    assert f.drug_ids == ("d3",)
    assert not np.isnan(f.response).any()


def test_filter_keeps_exactly_seventy_percent(rng):
    resp = np.ones((2, 10))
    resp[0, :7] = NA
    f = filter_missing(raw(rng.random((2, 2)), resp))
    assert f.cell_ids == ("c1", "c2") and len(f.drug_ids) == 3


def test_pca_line_in_3d(rng):
    t = rng.normal(size=40)
    x = np.outer(t, [1.0, 2.0, -0.5]) + 3.0
    assert pca_project(x, 1).explained[0] > 0.9999


def test_pca_orthogonal_data_reproduces_coordinates():
    x = np.array([[3, 0], [-3, 0], [0, 1], [0, -1]], dtype=float)
    p = pca_project(x, 2)
    assert np.allclose(np.abs(p.scores), np.abs(x))


def test_pca_full_rank_reconstruction(rng):
    x = rng.random((20, 8))
    p = pca_project(x, 8)
    assert np.max(np.abs(p.scores @ p.components.T - (x - x.mean(0)))) < 1e-8


def test_pca_gram_path_matches_svd(rng):
    x = rng.normal(size=(6, 30))
    p = pca_project(x, 5)
    xc = x - x.mean(0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    for j in range(5):
        v = vt[j] * np.sign(vt[j][np.argmax(np.abs(vt[j]))])
        assert np.allclose(p.components[:, j], v, atol=1e-8)
    assert np.allclose(p.explained, s[:5] ** 2 / np.sum(s ** 2))


def test_pca_scores_orthogonal_and_signed(rng):
    p = pca_project(rng.normal(size=(25, 10)), 6)
    gram = p.scores.T @ p.scores
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-8 * np.max(np.abs(gram))
    lead = p.components[np.argmax(np.abs(p.components), axis=0), np.arange(6)]
    assert np.all(lead > 0)


def test_pca_rejects_bad_d1(rng):
    with pytest.raises(ContractError):
        pca_project(rng.random((5, 3)), 4)


def test_minmax_examples():
    assert np.allclose(minmax_scale(np.array([[0.0], [5.0], [10.0]]))[:, 0], [0, 0.5, 1])
    assert np.all(minmax_scale(np.full((4, 1), 3.3)) == 0.5)
    assert np.allclose(minmax_scale(np.array([[1.0, 2.0, 4.0]]), axis=1), [[0, 1 / 3, 1]])


@given(st.integers(0, 10_000))
def test_minmax_hits_both_ends(seed):
    x = np.random.default_rng(seed).normal(size=(7, 3)) * 100
    y = minmax_scale(x)
    assert np.allclose(y.min(0), 0) and np.allclose(y.max(0), 1)


def test_prepare_toy_matches_enumeration():
    p = prepare(toy_screen(), d1=10)
    assert p.cell_ids == ("c1", "c2", "c4", "c5", "c7", "c8")
    assert p.actions.ids == ("d2", "d4", "d5")
    assert np.array_equal(p.actions.features, [[0, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 1]])
    expected_resp = np.array([[0.5, 0, 0.5], [0.75, 0.5, 0.5], [0.625, 0.25, 0.5],
                              [1, 0.75, 0.5], [0, 1, 0.5], [0.25, 0, 0.5]])
    assert np.allclose(p.responses, expected_resp, atol=1e-12, rtol=0)
    # gene 1 component has the larger scaled variance, gene 0 next, gene 2 is constant
    expected_ctx = np.array([[1, 1, 0.5], [1, 0, 0.5], [0, 0.75, 0.5],
                             [0, 0.25, 0.5], [0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    assert np.allclose(p.contexts, expected_ctx, atol=1e-12, rtol=0)
    assert p.meta["dropped_cells"] == ["c3", "c6"]
    assert p.meta["dropped_drugs"] == ["d1", "d3"]
    assert p.meta["d1"] == 3 and p.meta["d1_requested"] == 10
    assert p.meta["variance_explained"][1] == pytest.approx(40 / 44)


def test_prepare_negate_response():
    a = prepare(toy_screen(), d1=2)
    b = prepare(toy_screen(), d1=2, negate_response=True)
    assert np.allclose(a.responses[:, :2], 1 - b.responses[:, :2])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_prepare_idempotent(seed, d1):
    rng = np.random.default_rng(seed)
    resp = rng.random((12, 4))
    resp[rng.random(12) < 0.2, 0] = NA
    first = prepare(raw(rng.normal(size=(12, 9)), resp), d1=d1)
    second = prepare(RawScreen(first.contexts, first.responses, first.actions.features,
                               first.cell_ids, first.actions.ids), d1=d1)
    assert np.max(np.abs(second.contexts - first.contexts)) < 1e-12
    assert np.max(np.abs(second.responses - first.responses)) < 1e-12


def test_prepare_outputs_in_unit_box(rng):
    p = prepare(raw(rng.normal(size=(30, 50)), rng.normal(size=(30, 5))), d1=500)
    assert p.contexts.shape == (30, 29)
    for m in (p.contexts, p.responses):
        assert m.min() >= 0 and m.max() <= 1 and not np.isnan(m).any()


def test_roundtrip_through_csv(tmp_path):
    r = toy_screen()
    write_screen(r, tmp_path)
    back = load_screen(tmp_path)
    assert back.cell_ids == r.cell_ids and back.drug_ids == r.drug_ids
    assert np.array_equal(back.expression, r.expression)
    assert np.array_equal(np.isnan(back.response), np.isnan(r.response))
    assert np.array_equal(np.nan_to_num(back.response), np.nan_to_num(r.response))


def test_prepared_save_load(tmp_path):
    p = prepare(toy_screen(), d1=2)
    save_prepared(p, tmp_path)
    q = load_prepared(tmp_path)
    assert np.array_equal(q.contexts, p.contexts) and np.array_equal(q.responses, p.responses)
    assert json.loads((tmp_path / "meta.json").read_text())["dropped_drugs"] == ["d1", "d3"]
    env = q.environment(seed=3)
    assert env.rewards.shape == (6, 3)


def test_synthetic_emission(tmp_path):
    env = make_synthetic_linear(3, 6, 4, seed=0, n_contexts=10)
    write_screen(screen_from_environment(env), tmp_path)
    back = load_screen(tmp_path)
    assert np.array_equal(back.response, env.rewards)


def write(path, text):
    path.write_text(text, encoding="utf-8")


def good_files(tmp_path):
    write(tmp_path / "expression.csv", "cell_id,g1,g2\nc1,1,2\nc2,3,4\n")
    write(tmp_path / "response.csv", "cell_id,d1,d2\nc2,0.5,NA\nc1,,0.1\n")
    write(tmp_path / "fingerprints.csv", "drug_id,b1,b2\nd2,0,1\nd1,1,0\n")


def test_load_joins_ids_and_reads_missing(tmp_path):
    good_files(tmp_path)
    r = load_screen(tmp_path)
    assert r.cell_ids == ("c1", "c2")
    assert np.isnan(r.response[0, 0]) and r.response[0, 1] == 0.1
    assert np.isnan(r.response[1, 1]) and r.response[1, 0] == 0.5
    assert np.array_equal(r.fingerprints, [[1, 0], [0, 1]])


@pytest.mark.parametrize("name,text,line", [
    ("expression.csv", "cell_id,g1,g2\nc1,1,2\nc2,3\n", 3),
    ("expression.csv", "cell_id,g1,g2\nc1,1,x\nc2,3,4\n", 2),
    ("expression.csv", "cell_id,g1,g2\nc1,1,NA\nc2,3,4\n", 2),
    ("fingerprints.csv", "drug_id,b1,b2\nd2,0,1\nd1,2,0\n", 3),
    ("response.csv", "cell_id,d1,d2\nc2,0.5,NA\nc9,1,0.1\n", 3),
    ("expression.csv", "cell_id,g1,g2\nc1,1,2\nc1,3,4\n", 3),
])
def test_load_errors_carry_file_and_line(tmp_path, name, text, line):
    good_files(tmp_path)
    write(tmp_path / name, text)
    with pytest.raises(ParseError) as err:
        load_screen(tmp_path)
    assert err.value.path.endswith(name) and err.value.line == line
    assert f"{name}:{line}:" in str(err.value)


def test_load_drug_mismatch(tmp_path):
    good_files(tmp_path)
    write(tmp_path / "fingerprints.csv", "drug_id,b1,b2\nd2,0,1\nd7,1,0\n")
    with pytest.raises(ParseError, match="fingerprints.csv"):
        load_screen(tmp_path)
