import pytest

import attr
import numpy as np

from pyfedaf._utils import EmptyBatchError, ParameterError
from pyfedaf.data import Dataset
from pyfedaf.evaluation import (
    OVERLAP_COLUMNS,
    SweepSpec,
    backdoor_accuracy,
    overlap_validation,
    per_class_accuracy,
    prepare_scenario,
    run_arm,
    run_overlap,
    split_accuracy,
    summarize_records,
    sweep,
    timed,
)
from pyfedaf.inputs import (
    ARMS,
    DataConfig,
    EwcConfig,
    ExperimentConfig,
    FakeLabelKind,
    FederationConfig,
)
from pyfedaf.nn import ModelSpec, ParamVector, accuracy
from pyfedaf.outputs import TIMING_COLUMNS, MetricsRecord


def without_timing(row):
    return {k: v for k, v in row.items() if k not in TIMING_COLUMNS}


@pytest.fixture(scope="module")
def scenario(blob_experiment):
    return prepare_scenario(blob_experiment, trial=0)


@pytest.fixture(scope="module")
def three_class():
    spec = ModelSpec((5, 3))
    ds = Dataset.from_targets(np.full((6, 5), 0.5), [0, 0, 1, 1, 1, 2], 3)
    return spec, ds


def test_timed():
    result, seconds = timed(lambda: 42)
    assert result == 42
    assert 0 <= seconds < 0.1


def test_backdoor_accuracy_counts_flipped_labels(three_class):
    spec, ds = three_class
    zero = ParamVector.zeros(spec)
    # zero weights predict class 0 everywhere
    assert backdoor_accuracy(zero, spec, ds) == pytest.approx(2 / 6)
    assert backdoor_accuracy(zero, spec, ds.subset([2, 3])) == 0.0


def test_backdoor_accuracy_empty(three_class):
    spec, _ = three_class
    with pytest.raises(EmptyBatchError):
        backdoor_accuracy(ParamVector.zeros(spec), spec, Dataset(np.zeros((0, 5)), np.zeros((0, 3))))


def test_per_class_accuracy(three_class):
    spec, ds = three_class
    per_class = per_class_accuracy(ParamVector.zeros(spec), spec, ds)
    assert per_class.tolist() == [1.0, 0.0, 0.0]


def test_per_class_recomposes_accuracy(trained_state, blob_spec, blobs_test):
    params = trained_state.global_params
    per_class = per_class_accuracy(params, blob_spec, blobs_test)
    weighted = np.sum(per_class * blobs_test.class_counts) / len(blobs_test)
    assert weighted == pytest.approx(accuracy(params, blob_spec, blobs_test.as_batch()))


def test_per_class_missing_class_is_zero():
    spec = ModelSpec((5, 3))
    ds = Dataset.from_targets(np.full((2, 5), 0.5), [0, 0], 3)
    assert per_class_accuracy(ParamVector.zeros(spec), spec, ds).tolist() == [1.0, 0.0, 0.0]


def test_split_accuracy(three_class):
    spec, ds = three_class
    target, rest = split_accuracy(ParamVector.zeros(spec), spec, ds, 0)
    assert target == 1.0
    assert rest == 0.0


def test_scenario_backdoor(scenario, blob_experiment):
    assert scenario.target_class == blob_experiment.request.target_class
    assert scenario.state.round == blob_experiment.federation.rounds
    assert np.array_equal(scenario.poisoned, np.sort(scenario.request.target_indices))

    audit = scenario.audit_data
    clean = scenario.clean_train.subset(scenario.poisoned)
    assert np.all(audit.targets != clean.targets)
    assert np.all(audit.targets == scenario.backdoor.flip_rule[scenario.target_class])

    held = scenario.partition[scenario.request.client_id]
    assert np.all(np.isin(scenario.poisoned, held))


def test_scenario_without_backdoor(blob_experiment):
    cfg = attr.evolve(blob_experiment, backdoor=attr.evolve(blob_experiment.backdoor, enabled=False))
    sc = prepare_scenario(cfg)
    assert sc.backdoor is None
    assert sc.train == sc.clean_train
    assert sc.audit_data == sc.target_data


def test_scenario_deterministic(scenario, blob_experiment):
    again = prepare_scenario(blob_experiment, trial=0)
    assert again.state.global_params == scenario.state.global_params
    assert again.partition == scenario.partition


def test_trials_differ(scenario, blob_experiment):
    other = prepare_scenario(blob_experiment, trial=1)
    assert other.seed != scenario.seed
    assert other.state.global_params != scenario.state.global_params


def test_scenario_target_override(blob_experiment):
    sc = prepare_scenario(blob_experiment, target_class=2)
    assert sc.target_class == 2
    assert np.all(sc.clean_train.targets[list(sc.request.target_indices)] == 2)


@pytest.mark.parametrize("arm", ARMS)
def test_run_arm(scenario, arm):
    record = run_arm(scenario, arm)
    assert record.arm == arm
    assert record.seed == scenario.seed
    assert record.class_id == scenario.target_class
    assert record.trial == scenario.trial
    assert record.wall_time_seconds >= 0
    assert len(record.per_class_acc) == scenario.clean_train.class_count
    assert record.config["seed"] == scenario.config.seed
    assert record.bd_acc_before == backdoor_accuracy(
        scenario.state.global_params, scenario.spec, scenario.audit_data
    )


@pytest.mark.parametrize("arm", ARMS)
def test_run_arm_deterministic(scenario, arm):
    first = run_arm(scenario, arm).to_row()
    second = run_arm(scenario, arm).to_row()
    assert without_timing(first) == without_timing(second)


def test_run_arm_label_kinds(scenario):
    rows = {kind: run_arm(scenario, "fedaf", kind=kind) for kind in FakeLabelKind}
    assert all(0 <= r.test_acc_after <= 1 for r in rows.values())


def test_run_arm_unknown(scenario):
    with pytest.raises(ParameterError, match="Unknown arm"):
        run_arm(scenario, "finetune")


def test_overlap_validation(blob_experiment, blobs, blobs_test):
    spec = ModelSpec((blobs.dim, 16, blobs.class_count))
    client = blobs.subset(np.arange(0, len(blobs), 2))
    target, rest = overlap_validation(
        spec, client, blobs_test, 1, FakeLabelKind.DEBIAS_TEACHER, blob_experiment, seed=3
    )
    assert 0 <= target <= 1
    assert 0 <= rest <= 1

    again = overlap_validation(
        spec, client, blobs_test, 1, FakeLabelKind.DEBIAS_TEACHER, blob_experiment, seed=3
    )
    assert again == (target, rest)


def test_overlap_missing_class(blob_experiment, blobs, blobs_test):
    spec = ModelSpec((blobs.dim, 16, blobs.class_count))
    client = blobs.subset(np.flatnonzero(blobs.targets != 2))
    with pytest.raises(ParameterError):
        overlap_validation(
            spec, client, blobs_test, 2, FakeLabelKind.UNIFORM, blob_experiment, seed=0
        )


def test_run_overlap(blob_experiment):
    kinds = [FakeLabelKind.UNIFORM, FakeLabelKind.TEACHER]
    rows = run_overlap(blob_experiment, kinds, classes=[0, 3])
    assert len(rows) == 4
    assert all(tuple(r) == OVERLAP_COLUMNS for r in rows)
    assert all(r["trial"] == 0 for r in rows)
    assert [(r["kind"], r["class_id"]) for r in rows] == [
        ("uniform", 0),
        ("uniform", 3),
        ("teacher", 0),
        ("teacher", 3),
    ]


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec("momentum", [0.1])
    with pytest.raises(ValueError):
        SweepSpec("lambda", [])
    with pytest.raises(ValueError):
        SweepSpec("lambda", [1.0], trials=0)


@pytest.mark.parametrize(
    "param, values",
    [
        ("num_teachers", [2.7]),
        ("num_teachers", [0]),
        ("ewc_epochs", [1.5]),
        ("ewc_epochs", [-1]),
        ("lambda", [-0.1]),
        ("lambda", [float("inf")]),
    ],
)
def test_sweep_spec_bad_values(param, values):
    with pytest.raises(ParameterError):
        SweepSpec(param, values)


def test_sweep_spec_fractional_lambda():
    assert SweepSpec("lambda", [2.5]).values == (2.5,)


def test_sweep_spec_ewc_for():
    base = EwcConfig()
    assert SweepSpec("lambda", [5]).ewc_for(base, 5).lam == 5.0
    teachers = SweepSpec("num_teachers", [3]).ewc_for(base, 3.0)
    assert teachers.num_teachers == 3
    assert isinstance(teachers.num_teachers, int)
    assert SweepSpec("ewc_epochs", [2]).ewc_for(base, 2).ewc_epochs == 2

    epochs = SweepSpec("ewc_epochs", [0, 2])
    assert epochs.ewc_for(base, 0) is base
    assert epochs.epochs_for(0) == 0
    assert epochs.epochs_for(2.0) == 2
    assert SweepSpec("lambda", [5]).epochs_for(5) is None


def test_sweep(blob_experiment, scenario):
    spec = SweepSpec("lambda", [0.0, 1.0, 100.0])
    records = sweep(blob_experiment, spec, scenario=lambda trial: scenario)

    assert len(records) == 3
    assert [r.value for r in records] == [0.0, 1.0, 100.0]
    assert all(r.param == "lambda" and r.arm == "fedaf" for r in records)

    again = sweep(blob_experiment, spec, scenario=lambda trial: scenario)
    assert [without_timing(r.to_row()) for r in again] == [
        without_timing(r.to_row()) for r in records
    ]


def test_sweep_trials(blob_experiment):
    records = sweep(blob_experiment, SweepSpec("num_teachers", [1, 3], trials=2))
    assert len(records) == 4
    assert len({r.seed for r in records}) == 2


def test_sweep_zero_epochs(blob_experiment, scenario):
    records = sweep(blob_experiment, SweepSpec("ewc_epochs", [0, 1]), scenario=lambda trial: scenario)
    untouched, unlearned = records

    assert untouched.value == 0.0
    assert untouched.bd_acc_after == untouched.bd_acc_before
    assert untouched.test_acc_after == untouched.test_acc_before
    assert without_timing(unlearned.to_row()) == without_timing(
        run_arm(scenario, "fedaf", param="ewc_epochs", value=1.0).to_row()
    )


def test_rerun_from_row(blob_experiment):
    sc = prepare_scenario(blob_experiment, trial=1, target_class=2)
    row = run_arm(sc, "fedaf").to_row()
    assert row["trial"] == 1

    rerun = prepare_scenario(blob_experiment, row["trial"], target_class=row["class_id"])
    assert rerun.seed == row["seed"]
    assert without_timing(run_arm(rerun, "fedaf").to_row()) == without_timing(row)


def _record(arm, class_id, acc):
    return MetricsRecord(
        arm=arm,
        seed=1,
        class_id=class_id,
        bd_acc_before=1.0,
        bd_acc_after=acc,
        test_acc_before=0.9,
        test_acc_after=0.9,
        wall_time_seconds=1.0,
        target_acc_after=0.0,
        non_target_acc_after=0.9,
    )


def test_summarize_records():
    records = [_record("fedaf", 0, 0.1), _record("fedaf", 0, 0.3), _record("retrain", 0, 0.0)]
    summary = summarize_records(records)

    assert [(s["arm"], s["class_id"], s["n"]) for s in summary] == [
        ("fedaf", 0, 2),
        ("retrain", 0, 1),
    ]
    assert summary[0]["bd_acc_after_mean"] == pytest.approx(0.2)
    assert summary[0]["bd_acc_after_std"] == pytest.approx(0.1)
    assert "seed_mean" not in summary[0]


def test_summarize_bad_column():
    with pytest.raises(ParameterError):
        summarize_records([_record("fedaf", 0, 0.1)], by=("nope",))
    assert summarize_records([]) == []


def test_summarize_mixed_rows():
    rows = [r.to_row() for r in (_record("fedaf", 0, 0.1), _record("retrain", 0, 0.0))]
    rows.append(
        {"kind": "uniform", "seed": 1, "trial": 0, "class_id": 0, "target_acc": 0.1, "non_target_acc": 0.9}
    )
    with pytest.raises(ParameterError, match="not present in every row"):
        summarize_records(rows)

    summary = summarize_records(rows, by=("class_id",))
    assert summary[0]["n"] == 3
    assert summary[0]["target_acc_mean"] == pytest.approx(0.1)
    assert "trial_mean" not in summary[0]


# ---------------------------------------------------------------------------
# Forgetting on MNIST-sized blobs
# ---------------------------------------------------------------------------
FORGET_CLASSES = (0, 3, 7)


@pytest.fixture(scope="module")
def forgetting_experiment():
    return ExperimentConfig(
        data=DataConfig(source="blobs", classes=10, dim=784),
        seed=2024,
        hidden=(128,),
        federation=FederationConfig(
            client_count=4, local_epochs=1, rounds=10, learning_rate=0.05, batch_size=32
        ),
        ewc=EwcConfig(
            lam=10.0,
            ewc_epochs=1,
            learning_rate=0.01,
            conventional_epochs=1,
            conventional_learning_rate=10.0,
        ),
        trials=1,
    )


@pytest.fixture(scope="module")
def forgetting_records(forgetting_experiment):
    out = {}
    for c in FORGET_CLASSES:
        sc = prepare_scenario(forgetting_experiment, trial=0, target_class=c)
        out[c] = {arm: run_arm(sc, arm) for arm in ARMS}
    return out


@pytest.mark.parametrize("class_id", FORGET_CLASSES)
def test_backdoor_learned(forgetting_records, class_id):
    record = forgetting_records[class_id]["fedaf"]
    assert record.bd_acc_before >= 0.6
    assert record.test_acc_before >= 0.9


@pytest.mark.parametrize("class_id", FORGET_CLASSES)
def test_fedaf_forgets_backdoor(forgetting_records, class_id):
    record = forgetting_records[class_id]["fedaf"]
    assert record.bd_acc_after <= 0.05
    assert record.non_target_acc_after >= 0.9


@pytest.mark.parametrize("class_id", FORGET_CLASSES)
def test_retrain_forgets_backdoor(forgetting_records, class_id):
    assert forgetting_records[class_id]["retrain"].bd_acc_after <= 0.02


@pytest.mark.parametrize("class_id", FORGET_CLASSES)
def test_conventional_forgetting_collapses(forgetting_records, class_id):
    fedaf = forgetting_records[class_id]["fedaf"]
    conventional = forgetting_records[class_id]["fedaf-c"]
    assert conventional.bd_acc_after <= 0.05
    assert conventional.test_acc_after <= fedaf.test_acc_after - 0.2


def test_fedaf_faster_than_retrain(forgetting_records):
    fedaf = np.mean([r["fedaf"].wall_time_seconds for r in forgetting_records.values()])
    retrain = np.mean([r["retrain"].wall_time_seconds for r in forgetting_records.values()])
    assert fedaf <= retrain / 5
