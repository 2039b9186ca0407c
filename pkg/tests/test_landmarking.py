import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrisk.data_model import ADMISSION_ID, EVENTTIME, ID, LM, TYPE
from dynrisk.landmarking import (
    COUNT,
    STATUS,
    TSTART,
    TSTOP,
    WEIGHT,
    administrative_censor,
    attach_binary_labels,
    build_landmark_subset,
    expand_fine_gray,
    remove_extensions,
    stack_landmarks,
    write_expanded,
    write_stacked,
)


def _episodes(times, types, max_lm=30):
    """Episode rows at every landmark before the event, one constant covariate."""
    rows = []
    for i, (t, j) in enumerate(zip(times, types)):
        for s in range(0, min(int(np.ceil(t)), max_lm + 1)):
            if t > s or s == 0:
                rows.append({ID: str(i + 1), ADMISSION_ID: str(i + 1), LM: s, EVENTTIME: float(t), TYPE: int(j), "x": float(i % 2)})
    return pd.DataFrame(rows, columns=[ID, ADMISSION_ID, LM, EVENTTIME, TYPE, "x"])


episode_lists = st.lists(
    st.tuples(st.floats(0.01, 40, allow_nan=False).map(lambda v: round(v, 2)), st.sampled_from([1, 2, 3])),
    min_size=1,
    max_size=25,
)


def test_table_s1_rebuilt_from_raw_episodes(table_s1_raw, data_dir):
    stacked = stack_landmarks(table_s1_raw)
    assert len(stacked) == 22
    counts = stacked.frame.groupby(ID)[LM].agg(["min", "max"])
    assert counts.loc["1"].tolist() == [0, 4]
    assert counts.loc["2"].tolist() == [0, 9]
    assert counts.loc["3"].tolist() == [0, 1]
    assert counts.loc["4"].tolist() == [0, 4]
    buf = io.StringIO()
    write_stacked(stacked, buf)
    assert buf.getvalue() == (data_dir / "table_s1.csv").read_text()


def test_subject_2_at_landmark_0(table_s1_raw):
    sub = build_landmark_subset(table_s1_raw, 0, 7)
    row = sub[sub[ID] == "2"].iloc[0]
    assert row[EVENTTIME] == 7.0 and row[TYPE] == 0


def test_subset_beyond_all_events_is_empty(table_s1_raw):
    assert len(build_landmark_subset(table_s1_raw, 25, 7)) == 0


def test_window_must_be_positive(table_s1_raw):
    with pytest.raises(ValueError):
        build_landmark_subset(table_s1_raw, 0, 0)
    with pytest.raises(ValueError):
        stack_landmarks(table_s1_raw, w=-1)


def test_grid_must_increase(table_s1_raw):
    with pytest.raises(ValueError):
        stack_landmarks(table_s1_raw, grid=(0, 2, 1))
    with pytest.raises(ValueError):
        stack_landmarks(table_s1_raw, grid=())


def test_single_landmark_grid_matches_subset(table_s1_raw):
    stacked = stack_landmarks(table_s1_raw, grid=(0,))
    sub = build_landmark_subset(table_s1_raw, 0, 7).reset_index(drop=True)
    pd.testing.assert_frame_equal(stacked.frame[sub.columns], sub)
    assert (stacked.frame["lm_lin"] == 0).all() and (stacked.frame["lm_quad"] == 0).all()


def test_landmark_features_and_icu_interactions(table_s1_raw):
    f = stack_landmarks(table_s1_raw).frame
    np.testing.assert_array_equal(f["lm_lin"], f[LM] / 30)
    np.testing.assert_array_equal(f["lm_quad"], (f[LM] / 30) ** 2)
    np.testing.assert_array_equal(f["lm_lin_x_MS_is_ICU_unit"], f["lm_lin"] * f["MS_is_ICU_unit"])
    np.testing.assert_array_equal(f["lm_quad_x_MS_is_ICU_unit"], f["lm_quad"] * f["MS_is_ICU_unit"])


def test_landmark_30_features_are_one():
    ep = _episodes([35.0], [3])
    f = stack_landmarks(ep).frame
    last = f[f[LM] == 30].iloc[0]
    assert last["lm_lin"] == 1.0 and last["lm_quad"] == 1.0


def test_labels(table_s1):
    lab = attach_binary_labels(stack_landmarks(table_s1))
    r = lab[(lab[ID] == "2") & (lab[LM] == 0)].iloc[0]
    assert (r["y_binary"], r["y_multi"], r["y_rmtl"]) == (0, 0, -1)
    r = lab[(lab[ID] == "3") & (lab[LM] == 1)].iloc[0]
    assert (r["y_binary"], r["y_multi"]) == (0, 2)
    assert (lab.loc[lab[ID] == "1", "y_binary"] == 1).all()


def _recount(times, types, grid, w):
    """Independent at-risk and cause-1 counts per landmark from raw times."""
    times = np.asarray(times, dtype=float)
    types = np.asarray(types)
    out = {}
    for s in grid:
        at = times > s
        ev = at & (times <= s + w) & (types == 1)
        out[s] = (int(at.sum()), int(ev.sum()))
    return out


@settings(max_examples=50, deadline=None)
@given(episode_lists)
def test_row_counts_match_independent_recount(eps):
    times, types = zip(*eps)
    ep = _episodes(times, types)
    f = stack_landmarks(ep).frame
    expected = _recount(times, types, range(31), 7.0)
    for s, (n_at, n_ev) in expected.items():
        rows = f[f[LM] == s]
        assert len(rows) == n_at
        assert int((rows[TYPE] == 1).sum()) == n_ev
    assert len(f) == sum(v[0] for v in expected.values())


@settings(max_examples=50, deadline=None)
@given(episode_lists)
def test_stacking_invariants(eps):
    times, types = zip(*eps)
    f = stack_landmarks(_episodes(times, types)).frame
    cens = f[TYPE] == 0
    np.testing.assert_array_equal(f.loc[cens, EVENTTIME], f.loc[cens, LM] + 7.0)
    assert not f.duplicated([ID, LM]).any()
    ids = {s: set(f.loc[f[LM] == s, ID]) for s in range(31)}
    for s in range(30):
        assert ids[s + 1] <= ids[s]
    again = administrative_censor(f, 7.0)
    pd.testing.assert_frame_equal(again, f)


@settings(max_examples=50, deadline=None)
@given(episode_lists)
def test_expansion_conservation(eps):
    times, types = zip(*eps)
    stacked = stack_landmarks(_episodes(times, types))
    ex = expand_fine_gray(stacked)
    f = ex.frame
    assert int((f[COUNT] == 1).sum()) == len(stacked)
    assert (f[TSTART] < f[TSTOP]).all()
    assert (f[WEIGHT] == 1).all()
    back = remove_extensions(ex)
    cols = [ID, ADMISSION_ID, LM, EVENTTIME, TYPE, "x"]
    pd.testing.assert_frame_equal(back[cols], stacked.frame[cols], check_dtype=False)
    # extension rows only for competing events that precede a later cause-1 time in the subset
    for _, r in f[f[COUNT] == 2].iterrows():
        sub = stacked.frame[stacked.frame[LM] == r[LM]]
        t1 = sub.loc[sub[TYPE] == 1, EVENTTIME]
        assert r[STATUS] in (2, 3)
        assert r[TSTOP] == t1.max() and r[TSTART] < t1.max()


def test_table_s2_extension_rows(table_s1):
    f = expand_fine_gray(stack_landmarks(table_s1)).frame
    ext = f[f[COUNT] == 2]
    got = sorted(zip(ext[ID], ext[LM], ext[TSTART], ext[TSTOP], ext[STATUS]))
    assert got == [
        ("3", 0, 1.29, 4.42, 2),
        ("3", 1, 1.29, 4.42, 2),
        ("4", 3, 4.56, 9.34, 3),
        ("4", 4, 4.56, 9.34, 3),
    ]
    # subject 1 and 2 rows pass through unchanged
    assert (f.loc[f[ID].isin(["1", "2"]), COUNT] == 1).all()


def test_table_s2_golden_file(table_s1, data_dir):
    buf = io.StringIO()
    write_expanded(expand_fine_gray(stack_landmarks(table_s1)), buf)
    assert buf.getvalue() == (data_dir / "table_s2.csv").read_text()


def test_risk_set_at_4_42_includes_extension(table_s1):
    f = expand_fine_gray(stack_landmarks(table_s1)).frame
    lm0 = f[f[LM] == 0]
    at_risk = lm0[(lm0[TSTART] < 4.42) & (lm0[TSTOP] >= 4.42)]
    assert ("3", 2) in set(zip(at_risk[ID], at_risk[COUNT]))


def test_km_weights_split_at_censoring_jumps():
    # landmark 0: cause-1 at 5, competing at 1, censored at 2 and 3
    ep = pd.DataFrame(
        {ID: list("abcde"), ADMISSION_ID: list("abcde"), LM: 0, EVENTTIME: [1.0, 2.0, 3.0, 5.0, 6.0], TYPE: [2, 0, 0, 1, 3]}
    )
    st_ = stack_landmarks(ep, grid=(0,), w=100)
    f = expand_fine_gray(st_, censoring="km").frame
    ext = f[f[COUNT] == 2]
    assert ext[TSTART].tolist() == [1.0, 2.0, 3.0]
    assert ext[TSTOP].tolist() == [2.0, 3.0, 5.0]
    # censoring KM: G(2) = 3/4, G(3) = 3/4 * 2/3 = 1/2, G(1) = 1
    np.testing.assert_allclose(ext[WEIGHT], [1.0, 0.75, 0.5])
    admin = expand_fine_gray(st_).frame
    assert (admin[WEIGHT] == 1).all()


def test_unknown_censoring_mode(table_s1):
    with pytest.raises(ValueError):
        expand_fine_gray(stack_landmarks(table_s1), censoring="other")


def test_writer_adds_admission_column_when_needed(table_s1):
    df = table_s1.copy()
    df[ADMISSION_ID] = "A" + df[ID]
    buf = io.StringIO()
    write_stacked(stack_landmarks(df), buf)
    assert buf.getvalue().splitlines()[0].startswith("ID,ADMISSION_ID,LM")
