import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cact.errors import ContractError
from cact.evaluation import (accuracy, color_for, f1_per_class, rank_cells, read_matrix_csv, render_report,
                             write_matrix_csv)
from cact.training import History

import oracles
from reference_tables import BREAST_F1, BREAST_F1_SHADING_EXCEPTIONS, CONTEXT_VS_PATCH, POOLING_ROBUSTNESS


# -- metrics ------------------------------------------------------------------------------

def test_accuracy_example():
    assert accuracy([1, 2, 3, 3], [1, 2, 2, 3]) == 0.75


def test_f1_examples():
    assert f1_per_class([1, 1, 2], [1, 2, 2], 1) == pytest.approx(2 / 3)
    assert f1_per_class([2, 2], [1, 1], 1) == 0.0


def test_f1_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    preds, truths = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    for cls in range(4):
        assert f1_per_class(preds, truths, cls) == pytest.approx(oracles.confusion_f1(preds, truths, cls), abs=1e-15)


def test_metrics_reject_empty():
    with pytest.raises(ContractError):
        accuracy([], [])
    with pytest.raises(ContractError):
        f1_per_class([], [], 1)


# -- rank tables ------------------------------------------------------------------------------

@pytest.mark.parametrize("table", [CONTEXT_VS_PATCH, POOLING_ROBUSTNESS], ids=["context", "pooling"])
def test_reference_tables_reproduce_exactly(table):
    ranked = rank_cells(table["values"], table["rows"], table["cols"])
    assert ranked.colors == table["colors"]
    assert ranked.rank_sums == table["rank_sums"]


def test_f1_table_rank_sums_and_colors():
    ranked = rank_cells(BREAST_F1["values"], BREAST_F1["rows"], BREAST_F1["cols"])
    assert ranked.rank_sums == BREAST_F1["rank_sums"]
    for i, row in enumerate(BREAST_F1["rows"]):
        for j, col in enumerate(BREAST_F1["cols"]):
            expected = BREAST_F1["colors"][i][j]
            if (row, col) in BREAST_F1_SHADING_EXCEPTIONS:
                assert (expected, ranked.colors[i][j]) == BREAST_F1_SHADING_EXCEPTIONS[(row, col)]
            else:
                assert ranked.colors[i][j] == expected


def test_ties_at_the_maximum_are_all_orange():
    ranked = rank_cells([[0.9, 0.9, 0.5]])
    assert ranked.colors == [["orange", "orange", "none"]]


@pytest.mark.parametrize("ratio,color", [(0.975, "green"), (0.95, "blue"), (0.90, "yellow"), (0.85, "red"),
                                         (0.8499, "none")])
def test_band_lower_bounds_are_inclusive(ratio, color):
    assert color_for(ratio * 100 / 100, 1.0) == color


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(0.01, 100), min_size=3, max_size=3), min_size=1, max_size=5), st.data())
def test_rank_sums_follow_column_permutation(rows, data):
    perm = data.draw(st.permutations(range(3)))
    values = np.array(rows)
    a = rank_cells(values)
    b = rank_cells(values[:, perm])
    assert b.rank_sums == [a.rank_sums[p] for p in perm]
    assert all(1 * len(rows) <= s <= 6 * len(rows) for s in a.rank_sums)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=2, max_size=6), st.sampled_from([0.25, 2.0, 4.0, 0.5]))
def test_colors_invariant_to_power_of_two_scaling(row, scale):
    assert rank_cells([row]).colors == rank_cells([[v * scale for v in row]]).colors


def test_rank_cells_contract():
    with pytest.raises(ContractError):
        rank_cells([1.0, 2.0])
    with pytest.raises(ContractError):
        rank_cells([[1.0, np.nan]])
    with pytest.raises(ContractError):
        rank_cells([[1.0, 2.0]], ["a", "b"])


# -- report --------------------------------------------------------------------------------------

def test_render_report_bundle(tmp_path):
    table = rank_cells(CONTEXT_VS_PATCH["values"], CONTEXT_VS_PATCH["rows"], CONTEXT_VS_PATCH["cols"])
    hist = History([{"epoch": 0, "train_loss": 1.5, "val_accuracy": 0.5, "strategy": "standard", "fold": "1",
                     "seed": 7}])
    written = render_report(table, tmp_path, [hist], {"img": {"outcome": "low"}})
    text = written["table"].read_text().splitlines()
    assert text[-1].split() == ["Rank-sum", "10", "7", "8", "5"]
    assert "92.08 (green)" in text[1]
    assert written["ranks"].read_text().splitlines()[-1] == "rank_sum,10,7,8,5"
    assert len(written["curves"].read_text().splitlines()) == 2
    assert json.loads(written["vote_maps"].read_text()) == {"img": {"outcome": "low"}}


def test_render_report_without_curves(tmp_path):
    table = rank_cells([[1.0, 0.9]])
    written = render_report(table, tmp_path)
    assert "curves" not in written and not (tmp_path / "training_curves.csv").exists()


def test_render_report_dimension_mismatch(tmp_path):
    table = rank_cells([[1.0, 0.9]])
    table.row_labels = ["a", "b"]
    with pytest.raises(ContractError):
        render_report(table, tmp_path)


def test_matrix_csv_round_trip(tmp_path):
    values = np.random.default_rng(0).uniform(size=(3, 4))
    write_matrix_csv(tmp_path / "m.csv", ["a", "b", "c"], ["w", "x", "y", "z"], values)
    rows, cols, back = read_matrix_csv(tmp_path / "m.csv")
    assert rows == ["a", "b", "c"] and cols == ["w", "x", "y", "z"]
    np.testing.assert_array_equal(back, values)


def test_matrix_csv_rejects_other_files(tmp_path):
    (tmp_path / "h.csv").write_text("epoch,train_loss\n0,1.0\n")
    with pytest.raises(ContractError):
        read_matrix_csv(tmp_path / "h.csv")
