import csv
import math

import numpy as np
import pytest

from mirrormeta import tasks


def blobs(**kw):
    return tasks.TaskFamilyConfig(family="gaussian-blobs", **kw)


def test_sinusoid_label_examples():
    assert tasks.sinusoid_labels(math.pi / 2, 1.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert tasks.sinusoid_labels(0.0, 2.0, math.pi) == pytest.approx(0.0, abs=1e-15)


def test_sinusoid_task_shapes_and_range():
    cfg = tasks.TaskFamilyConfig(N=10)
    task = tasks.sample_sinusoid_task(cfg, 3)
    assert task.train_inputs.shape == (10, 1)
    assert task.val_inputs.shape == (tasks.VAL_SHOTS, 1)
    assert task.train_labels.shape == (10, 1)
    xs = np.concatenate([task.train_inputs, task.val_inputs])
    assert np.all((xs >= -5) & (xs <= 5))
    a, b = task.info["amplitude"], task.info["phase"]
    assert 0.1 <= a <= 5.0 and 0.0 <= b <= math.pi
    np.testing.assert_array_equal(task.val_labels, a * np.sin(task.val_inputs + b))


def test_same_seed_gives_bit_identical_task():
    for cfg in (tasks.TaskFamilyConfig(), blobs(M=3, N=2, input_dim=4)):
        t1 = tasks.sample_task(cfg, 42)
        t2 = tasks.sample_task(cfg, 42)
        for name in ("train_inputs", "train_labels", "val_inputs", "val_labels"):
            assert getattr(t1, name).tobytes() == getattr(t2, name).tobytes()


@pytest.mark.parametrize("M,N,train,val", [(5, 1, 5, 75), (2, 5, 10, 30)])
def test_classification_split_sizes(M, N, train, val):
    task = tasks.sample_classification_task(blobs(M=M, N=N, input_dim=3), 0)
    assert task.train_inputs.shape == (train, 3)
    assert task.val_inputs.shape == (val, 3)
    assert task.train_labels.dtype.kind == "i"


def test_class_balance_and_disjoint_records():
    task = tasks.sample_classification_task(blobs(M=4, N=3, input_dim=2), 9)
    assert np.bincount(task.train_labels).tolist() == [3] * 4
    assert np.bincount(task.val_labels).tolist() == [15] * 4
    assert not set(task.train_ids) & set(task.val_ids)
    assert set(task.train_ids) | set(task.val_ids) == set(range(4 * 18))


def test_zero_spread_puts_points_on_centres():
    task = tasks.sample_classification_task(blobs(M=3, N=2, spread=0.0), 1)
    centres = task.info["centers"]
    np.testing.assert_array_equal(task.train_inputs, centres[task.train_labels])
    np.testing.assert_array_equal(task.val_inputs, centres[task.val_labels])


def test_pools_use_disjoint_seeds():
    cfg = tasks.TaskFamilyConfig(seed=5)
    a = tasks.pool_task(cfg, "train", 0)
    b = tasks.pool_task(cfg, "test", 0)
    assert not np.array_equal(a.train_inputs, b.train_inputs)
    again = tasks.pool_task(cfg, "train", 0)
    np.testing.assert_array_equal(a.train_inputs, again.train_inputs)


@pytest.mark.parametrize("kw", [
    {"family": "images"},
    {"N": 0},
    {"family": "gaussian-blobs", "M": 1},
    {"amplitude": (2.0, 1.0)},
    {"input_dim": 2},
    {"family": "gaussian-blobs", "spread": -1.0},
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        tasks.TaskFamilyConfig(**kw)


def test_wrong_family_for_sampler():
    with pytest.raises(ValueError):
        tasks.sample_sinusoid_task(blobs(), 0)
    with pytest.raises(ValueError):
        tasks.sample_classification_task(tasks.TaskFamilyConfig(), 0)


def test_dump_task_csv(tmp_path):
    task = tasks.sample_classification_task(blobs(M=2, N=1, input_dim=2), 0)
    path = tmp_path / "task.csv"
    tasks.dump_task_csv(task, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["split", "x0", "x1", "label"]
    assert len(rows) == 1 + 2 + 30
    assert [float(v) for v in rows[1][1:3]] == task.train_inputs[0].tolist()
