import numpy as np

from modconn.experiments import enumerate_configurations, make_planted_task, planted_student
from modconn.graph import graph_forward
from modconn.train import accuracy


def test_teacher_labels_follow_the_planted_connection():
    task = make_planted_task(seed=0, n_train=128, n_val=64)
    assert set(task.planted) == {"in2", "in3"}
    assert task.planted["in3"].sum() == 1
    logits = graph_forward(task.teacher, task.val.images, mode="eval").logits.data
    assert accuracy(logits, task.val.labels) == 1.0


def test_teacher_uses_every_class():
    for seed in range(10):
        labels = make_planted_task(seed=seed).train.labels
        assert np.bincount(labels, minlength=4).min() >= 0.05 * len(labels)


def test_student_starts_fresh():
    task = make_planted_task(seed=1, n_train=64, n_val=32)
    s = planted_student(task, seed=1)
    assert s.frozen_features
    assert all(not m.frozen and np.all(m.real == 0.5) for m in s.masks.values())
    assert [n for n, _ in s.trainable_parameters()] == ["head.weight", "head.bias"]
    configs = enumerate_configurations(s)
    assert len(configs) == 2
    assert [c["in3"].tolist() for c in configs] == [[1, 0], [0, 1]]
