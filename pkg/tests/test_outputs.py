import pytest

import json
import math
import numpy as np

from pyfedaf._utils import ParameterError, ShapeError
from pyfedaf.nn import ModelSpec, xavier_init
from pyfedaf.outputs import (
    METRICS_COLUMNS,
    GlobalState,
    MetricsRecord,
    RoundMetrics,
    collect_csv_paths,
    read_csv_rows,
    write_metrics_csv,
    write_metrics_json,
    write_round_metrics_csv,
)


def make_record(**kwargs):
    defaults = dict(
        arm="fedaf",
        seed=4,
        class_id=2,
        bd_acc_before=0.98,
        bd_acc_after=0.05,
        test_acc_before=0.95,
        test_acc_after=0.93,
        wall_time_seconds=0.5,
        target_acc_after=0.1,
        non_target_acc_after=0.96,
        per_class_acc=[0.9, 0.8, 0.1],
    )
    defaults.update(kwargs)
    return MetricsRecord(**defaults)


def test_state_save_read(tmp_path, trained_state):
    fname = trained_state.save(tmp_path / "state.h5")
    state = GlobalState.read(fname)

    assert state.round == trained_state.round
    assert state.seed == trained_state.seed
    assert state.model_spec == trained_state.model_spec
    assert state.global_params == trained_state.global_params
    assert all(a == b for a, b in zip(state.client_params, trained_state.client_params))
    assert np.array_equal(state.weights, trained_state.weights)


def test_state_no_clobber(tmp_path, trained_state):
    trained_state.save(tmp_path / "state.h5")
    with pytest.raises(FileExistsError):
        trained_state.save(tmp_path / "state.h5")
    trained_state.save(tmp_path / "state.h5", clobber=True)


def test_state_validation(tiny_spec):
    p = xavier_init(tiny_spec, 0)
    with pytest.raises(ParameterError):
        GlobalState(round=0, global_params=p, client_params=[p, p], weights=[0.5, 0.6], model_spec=tiny_spec)
    with pytest.raises(ShapeError):
        GlobalState(round=0, global_params=p, client_params=[p], weights=[0.5, 0.5], model_spec=tiny_spec)
    with pytest.raises(ShapeError):
        GlobalState(
            round=0, global_params=p, client_params=[p], weights=[1.0], model_spec=ModelSpec((5, 2, 3))
        )


def test_record_validation():
    with pytest.raises(ValueError):
        make_record(bd_acc_after=1.5)
    with pytest.raises(ValueError):
        make_record(wall_time_seconds=-1)
    with pytest.raises(ValueError):
        make_record(per_class_acc=[0.5, 2.0])
    with pytest.raises(ValueError):
        make_record(trial=-1)

    assert math.isnan(make_record(non_target_acc_after=float("nan")).non_target_acc_after)


def test_record_row():
    rec = make_record()
    row = rec.to_row()
    assert tuple(row) == METRICS_COLUMNS
    assert row["wall_time_s"] == 0.5
    assert row["param"] == ""
    assert row["trial"] == 0
    assert make_record(trial=3).to_row()["trial"] == 3
    assert rec.bd_acc == 0.05
    assert rec.test_acc == 0.93


def test_metrics_csv(tmp_path):
    records = [make_record(), make_record(arm="retrain", param="lambda", value=10.0)]
    fname = write_metrics_csv(records, tmp_path / "out" / "metrics.csv")

    with open(fname) as fl:
        assert fl.readline().strip() == ",".join(METRICS_COLUMNS)

    rows = read_csv_rows(fname)
    assert rows[0]["arm"] == "fedaf"
    assert rows[0]["class_id"] == 2
    assert rows[0]["param"] is None
    assert rows[1]["value"] == 10.0
    assert rows[1]["bd_acc_after"] == pytest.approx(0.05)


def test_metrics_json(tmp_path):
    fname = write_metrics_json([make_record()], tmp_path / "metrics.json", config={"seed": 4})
    with open(fname) as fl:
        payload = json.load(fl)

    assert payload["config"] == {"seed": 4}
    assert payload["records"][0]["per_class_acc"] == [0.9, 0.8, 0.1]
    assert "version" in payload


def test_round_metrics_csv(tmp_path):
    metrics = [RoundMetrics(round=0, client=k, loss=0.5, acc=0.75) for k in range(3)]
    rows = read_csv_rows(write_round_metrics_csv(metrics, tmp_path / "rounds.csv"))
    assert [r["client"] for r in rows] == [0, 1, 2]
    assert rows[0]["acc"] == 0.75


def test_collect_csv_paths(tmp_path):
    (tmp_path / "a.csv").write_text("x\n")
    (tmp_path / "b.csv").write_text("x\n")
    (tmp_path / "c.json").write_text("{}")
    assert collect_csv_paths([tmp_path]) == [tmp_path / "a.csv", tmp_path / "b.csv"]
    assert collect_csv_paths([tmp_path / "c.json"]) == [tmp_path / "c.json"]
