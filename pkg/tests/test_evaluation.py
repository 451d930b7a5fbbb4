import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tslora.data import ScalingParams, WindowedSample
from tslora.errors import ContractError, DataError, RankError
from tslora.evaluation import (
    MetricsReport,
    aggregate_median,
    dtw_distance,
    evaluate_model,
    mape,
    mse,
    param_tradeoff,
    rank_sweep,
    read_long_csv,
    write_long_csv,
    write_tradeoff_csv,
    write_wide_csv,
)

from .oracles import brute_force_dtw, delannoy, median_by_sorting, monotone_paths

series = st.lists(st.integers(0, 2), min_size=1, max_size=6)


# ----------------------------------------------------------------- metrics


def test_mse_cases():
    assert mse([0.3, 0.4], [0.3, 0.4]) == 0.0
    assert mse([1, 3], [1, 1]) == 2.0
    with pytest.raises(ContractError):
        mse(np.zeros(36), np.zeros(35))


def test_mape_cases():
    assert mape([5.0], [5.0]) == 0.0
    assert abs(mape([110], [100]) - 10.0) < 1e-12
    assert np.isfinite(mape([1.0, 2.0], [0.0, 2.0]))
    with pytest.raises(ContractError):
        mape([1, 2], [1])


def test_dtw_cases():
    assert dtw_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert dtw_distance([0, 0, 1], [0, 1, 1]) == 0.0
    assert dtw_distance([0, 1], [1, 1]) == 1.0
    with pytest.raises(ContractError):
        dtw_distance([], [1])


def test_path_enumerator_counts():
    for n in range(1, 6):
        for m in range(1, 6):
            assert sum(1 for _ in monotone_paths(n, m)) == delannoy(n - 1, m - 1)


@settings(max_examples=300, deadline=None)
@given(series, series)
def test_dtw_matches_brute_force(a, b):
    assert dtw_distance(a, b) == brute_force_dtw(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=15),
       st.lists(st.floats(-50, 50), min_size=1, max_size=15))
def test_dtw_symmetry_and_identity(a, b):
    assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), abs=1e-9)
    assert dtw_distance(a, a) == 0.0
    assert dtw_distance(a, b) >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 15).flatmap(
    lambda n: st.tuples(*(st.lists(st.floats(-50, 50), min_size=n, max_size=n),) * 2)))
def test_dtw_never_worse_than_diagonal(pair):
    a, b = pair
    assert dtw_distance(a, b) <= np.abs(np.subtract(a, b)).sum() + 1e-9


def test_median_cases():
    np.testing.assert_array_equal(aggregate_median(np.tile([1.0, 2.0], (4, 1))), [1.0, 2.0])
    assert aggregate_median(np.array([[1.0], [2.0], [9.0]]))[0] == 2.0
    assert aggregate_median(np.arange(1.0, 21.0)[:, None])[0] == 10.5
    with pytest.raises(ContractError):
        aggregate_median(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3), min_size=1, max_size=21))
def test_median_matches_sorting(paths):
    arr = np.array(paths)
    expected = [median_by_sorting(arr[:, j]) for j in range(3)]
    np.testing.assert_allclose(aggregate_median(arr), expected)


# ---------------------------------------------------------------- protocol


class Oracle:
    """Knows every test horizon; forecasts it exactly with zero spread."""

    def __init__(self, windows, config):
        self.config = config
        self.lookup = {w.context.tobytes(): w.horizon for w in windows}

    def num_params(self):
        return 0


@pytest.fixture
def tiny_windows(rng):
    out = []
    for i in range(3):
        full = 0.5 + 0.3 * np.sin(np.arange(18) / 3.0 + i)
        out.append(WindowedSample(full[:12], full[12:], f"s{i}", f"p{i}", "MeanBP"))
    return out


def test_perfect_predictor_scores_zero(monkeypatch, tiny_windows, small_config):
    import tslora.evaluation as ev

    oracle = Oracle(tiny_windows, small_config)

    def fake_rollout(model, contexts, h, rng):
        return np.array([model.lookup[c.tobytes()] for c in contexts])

    monkeypatch.setattr(ev, "rollout", fake_rollout)
    rep = evaluate_model(oracle, tiny_windows, ScalingParams(50.0, 150.0), n_samples=4, n_runs=3)
    for metric in ("mse", "dtw", "mape"):
        assert rep.per_run[metric] == [0.0, 0.0, 0.0]


def test_evaluate_is_seeded_and_sized(small_model, tiny_windows):
    scaling = {"MeanBP": ScalingParams(60.0, 120.0)}
    a = evaluate_model(small_model, tiny_windows, scaling, n_samples=20, n_runs=10, seed=3)
    b = evaluate_model(small_model, tiny_windows, scaling, n_samples=20, n_runs=10, seed=3)
    assert a.per_run == b.per_run
    assert all(len(v) == 10 for v in a.per_run.values())
    assert len(set(a.per_run["mse"])) > 1  # runs differ
    assert a.total_params == small_model.num_params() and a.trainable_params == 0


def test_zero_std_single_sample_is_run_invariant(small_model, tiny_windows):
    small_model.params["head.weight"][1] = 0.0
    small_model.params["head.bias"][1] = -50.0
    rep = evaluate_model(small_model, tiny_windows, ScalingParams(0.0, 1.0), n_samples=1, n_runs=10)
    # std is floored at 1e-6, so runs agree to that noise level rather than bitwise
    for metric in ("mse", "dtw"):
        assert np.ptp(rep.per_run[metric]) < 1e-5
    # mape is in percent and divides by truths near 0.2, so the same noise is ~500x larger
    truth_floor = min(np.abs(w.horizon).min() for w in tiny_windows)
    assert np.ptp(rep.per_run["mape"]) < 100 * 1e-5 / truth_floor


def test_evaluate_needs_windows(small_model):
    with pytest.raises(DataError):
        evaluate_model(small_model, [], ScalingParams(0.0, 1.0))


# -------------------------------------------------------------- report CSVs


def _report(setting, vital="MeanBP", trainable=0):
    per_run = {"mse": [0.1, 0.3], "dtw": [1.0, 2.0], "mape": [5.0, 7.0]}
    return MetricsReport("toy", setting, vital, per_run, trainable, 1000 + trainable)


def test_long_csv_round_trip(tmp_path):
    reports = [_report("zero_shot"), _report("lora_ft", trainable=2048)]
    write_long_csv(reports, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "model,setting,vital,metric,run,value"
    assert len(lines) == 1 + 2 * 3 * 2
    back = read_long_csv(tmp_path / "r.csv")
    assert [r.per_run for r in back] == [r.per_run for r in reports]


def test_wide_csv_layout(tmp_path):
    reports = [_report(s, v) for v in ("MeanBP", "HeartRate") for s in ("lora_ft", "zero_shot", "full_ft")]
    write_wide_csv(reports, tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == ("model,setting,HeartRate_mse,HeartRate_dtw,HeartRate_mape,"
                        "MeanBP_mse,MeanBP_dtw,MeanBP_mape")
    assert [l.split(",")[1] for l in lines[1:]] == ["zero_shot", "full_ft", "lora_ft"]
    assert lines[1].split(",")[2] == repr(0.2)


def test_param_tradeoff_rows(tmp_path):
    rows = param_tradeoff([_report("zero_shot"), _report("lora_ft", trainable=2048)])
    assert rows[0].finetuned_params == 0
    assert (rows[1].finetuned_params, rows[1].total_params) == (2048, 3048)
    assert rows[1].mape == 6.0
    write_tradeoff_csv(rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[2] == "toy,lora_ft,MeanBP,3048,2048,6.0"
    with pytest.raises(ContractError):
        param_tradeoff([])


def test_rank_sweep_validates_before_training(small_model):
    from tslora.data import Dataset

    with pytest.raises(RankError):
        rank_sweep(small_model, Dataset([], [], []), [1, 2, 99])
    with pytest.raises(RankError):
        rank_sweep(small_model, Dataset([], [], []), [])
