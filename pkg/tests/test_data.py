import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morelt.data import (
    LongTailSpec,
    Split,
    SplitSpec,
    dataset_stats,
    exp_class_counts,
    gen_multi,
    gen_single,
    imbalance_factor,
    load_csv,
    split_assign,
    write_csv,
)
from morelt.errors import ConfigError, DataError, ParseError, SchemaError
from morelt.losses import Task
from morelt.train import TrainConfig, train_run

M, MED, F = Split.MANY, Split.MEDIUM, Split.FEW


def test_counts_endpoints():
    assert exp_class_counts(LongTailSpec(2, 100, 100, 4)).tolist() == [100, 1]
    assert exp_class_counts(LongTailSpec(5, 30, 1, 4)).tolist() == [30] * 5


def test_counts_against_direct_formula():
    counts = exp_class_counts(LongTailSpec(10, 500, 100, 16))
    ref = []
    for i in range(10):
        v = 500.0
        for _ in range(i):
            v *= 100.0 ** (-1.0 / 9.0)
        ref.append(int(np.floor(v + 0.5)))
    assert counts.tolist() == ref == [500, 300, 180, 108, 65, 39, 23, 14, 8, 5]
    assert imbalance_factor(counts) == 100.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(20, 2000), st.floats(1.0, 20.0))
def test_counts_nonincreasing_with_endpoints(C, n_max, IF):
    c = exp_class_counts(LongTailSpec(C, n_max, IF, 3))
    assert np.all(np.diff(c) <= 0) and c[0] == n_max and c.min() >= 1
    assert c[-1] == int(np.floor(n_max / IF + 0.5))


def test_thin_profile_is_config_error():
    with pytest.raises(ConfigError):
        exp_class_counts(LongTailSpec(3, 10, 100, 2))
    with pytest.raises(ConfigError):
        LongTailSpec(3, 10, 0.5, 2)


def test_imbalance_factor_examples():
    assert imbalance_factor([4980, 1000, 20, 5]) == 996.0
    assert imbalance_factor([7, 7, 7]) == 1.0
    assert round(imbalance_factor([441, 350, 300, 289]), 3) == 1.526
    with pytest.raises(DataError):
        imbalance_factor([3, 0])


def test_gen_single_determinism_and_priors():
    spec = LongTailSpec(6, 80, 20, 5, seed=4)
    (a, ta), (b, tb) = gen_single(spec), gen_single(spec)
    assert a.features.tobytes() == b.features.tobytes() and np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.priors.single, a.counts / len(a))
    assert abs(a.priors.single.sum() - 1) <= 1e-12
    assert np.all(ta.counts == spec.n_test_per_class)
    assert not np.array_equal(a.features[:5], ta.features[:5])


def test_linear_probe_separates_balanced_classes():
    train, test = gen_single(LongTailSpec(10, 100, 1, 16, seed=0, separation=4.0))
    res = train_run(TrainConfig(hidden=(), decompose=False, total_steps=600, lr=0.05), train, test)
    assert res.log[-1]["split_metrics"]["all"] > 90.0


def test_gen_multi_one_label_per_sample():
    train, _ = gen_multi(LongTailSpec(5, 50, 5, 4, seed=1), 1.0)
    assert np.all(train.labels.sum(axis=1) == 1)


def test_gen_multi_label_rate_and_priors():
    train, _ = gen_multi(LongTailSpec(12, 8000, 5, 4, seed=2), 2.5)
    assert len(train) >= 10_000
    assert abs(train.labels.sum(axis=1).mean() - 2.5) <= 0.25
    assert abs(train.priors.multi.sum() - 1) <= 1e-12
    assert train.labels.sum(axis=1).min() >= 1


def test_gen_multi_avg_label_bounds():
    with pytest.raises(ConfigError):
        gen_multi(LongTailSpec(3, 10, 2, 2), 4.0)


def test_csv_hand_file(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("f0,f1,label\n0.5,-1.25,1\n2.0,3.0,0\n")
    ds = load_csv(p, "single")
    assert ds.features.tolist() == [[0.5, -1.25], [2.0, 3.0]] and ds.labels.tolist() == [1, 0]
    q = tmp_path / "m.csv"
    q.write_text("f0,y0,y1,y2\n1.0,1,0,1\n-2.0,0,1,0\n")
    dm = load_csv(q, "multi")
    assert dm.labels.tolist() == [[1, 0, 1], [0, 1, 0]] and dm.task is Task.MULTI


@pytest.mark.parametrize("task", ["single", "multi"])
def test_csv_round_trip(tmp_path, task):
    spec = LongTailSpec(4, 30, 5, 3, seed=7)
    train, _ = gen_single(spec) if task == "single" else gen_multi(spec, 2.0)
    p = tmp_path / "d.csv"
    write_csv(train, p)
    back = load_csv(p, task, num_classes=train.num_classes)
    assert back.features.tobytes() == train.features.tobytes()
    assert np.array_equal(back.labels, train.labels)
    assert b"\r" not in p.read_bytes()


def test_csv_errors(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("f0,y0,y1\n1.0,1,0\n2.0,0,0\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p, "multi")
    p.write_text("f0,label\n1.0,0\nabc,1\n")
    with pytest.raises(ParseError, match=":3"):
        load_csv(p, "single")
    p.write_text("f0,label\n1.0,0\n1.0,0,5\n")
    with pytest.raises(SchemaError):
        load_csv(p, "single")
    p.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        load_csv(p, "single")
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", "single")


def test_split_examples():
    assert split_assign([100, 50, 1]) == [M, MED, F]
    assert split_assign([5, 5, 5, 5, 5, 5]) == [M, M, MED, MED, F, F]
    assert split_assign([150, 60, 10], SplitSpec("absolute", 100, 20)) == [M, MED, F]
    assert split_assign([500, 300, 180, 108, 65, 39, 23, 14, 8, 5]) == [M] * 4 + [MED] * 3 + [F] * 3
    with pytest.raises(ConfigError):
        SplitSpec("absolute", 20, 100)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=1, max_size=25), st.randoms(use_true_random=False))
def test_split_total_monotone_and_equivariant(counts, rnd):
    tags = split_assign(counts)
    assert len(tags) == len(counts)
    rank = {M: 0, MED: 1, F: 2}
    for i in range(len(counts)):
        for j in range(len(counts)):
            if counts[i] > counts[j]:
                assert rank[tags[i]] <= rank[tags[j]]
    distinct = list(dict.fromkeys(counts))
    if len(distinct) == len(counts):  # without ties a relabeling permutes tags identically
        perm = list(range(len(counts)))
        rnd.shuffle(perm)
        permuted = split_assign([counts[k] for k in perm])
        assert permuted == [tags[k] for k in perm]


def test_dataset_stats():
    train, _ = gen_single(LongTailSpec(10, 500, 100, 16, seed=1))
    st_ = dataset_stats(train)
    assert st_["imbalance_factor"] == 100.0 and st_["num_samples"] == 1242
    assert st_["split_tags"][:4] == ["many"] * 4
