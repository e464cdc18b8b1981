import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distl.errors import InvalidConfigError, InvalidInputError
from distl.protocol import (
    DataPartition,
    GenerationSchedule,
    SampleRecord,
    corrupt_labels,
    inject_unseen,
    make_partition,
    pool_at,
    read_manifest,
    write_manifest,
)
from distl.synth import synth_dataset


def dummy_manifest(n_pos, n_neg, prefix="r"):
    recs = [SampleRecord(f"{prefix}{i}", f"img/{i}.png", 1, "tb") for i in range(n_pos)]
    recs += [SampleRecord(f"{prefix}{n_pos + i}", f"img/{n_pos + i}.png", 0, "normal") for i in range(n_neg)]
    return recs


def ids(records):
    return {r.id for r in records}


def test_paper_arithmetic_35985():
    part = make_partition(dummy_manifest(5893, 30092), 0.1, 3, seed=0)
    assert len(part.labeled) == 3598
    assert sum(len(f) for f in part.folds) == 32387


def test_single_fold_schedule():
    part = make_partition(dummy_manifest(50, 50), 0.1, 1, seed=0)
    sched = GenerationSchedule.default(1)
    assert sched.t_max == 1
    assert ids(pool_at(part, sched, 1)) == ids(part.folds[0])


def test_stratified_labeled_fraction():
    part = make_partition(dummy_manifest(137, 863), 0.1, 3, seed=4)
    pos = sum(r.label == 1 for r in part.labeled)
    neg = sum(r.label == 0 for r in part.labeled)
    assert abs(pos - 13.7) <= 1 and abs(neg - 86.3) <= 1


def test_bad_fraction():
    with pytest.raises(InvalidConfigError):
        make_partition(dummy_manifest(5, 5), 1.0)
    with pytest.raises(InvalidConfigError):
        make_partition(dummy_manifest(5, 5), 0.0)


def test_pool_at_defaults():
    part = make_partition(dummy_manifest(300, 700), 0.1, 3, seed=1)
    sched = GenerationSchedule.default(3)
    assert ids(pool_at(part, sched, 1)) == ids(part.folds[0])
    assert ids(pool_at(part, sched, 3)) == ids(r for f in part.folds for r in f)
    assert [len(pool_at(part, sched, t)) for t in (1, 2, 3)] == [300, 600, 900]
    with pytest.raises(InvalidInputError):
        pool_at(part, sched, 4)
    with pytest.raises(InvalidInputError):
        pool_at(part, sched, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(20, 400), st.integers(1, 5), st.floats(0.05, 0.5))
def test_partition_invariants(seed, n, folds, frac):
    rng = np.random.default_rng(seed)
    n_pos = int(rng.integers(1, n))
    part = make_partition(dummy_manifest(n_pos, n - n_pos), frac, folds, seed)
    sched = GenerationSchedule.default(folds)
    lab = ids(part.labeled)
    fold_ids = [ids(f) for f in part.folds]
    assert len(part.labeled) == int(np.floor(frac * n))
    for i, f in enumerate(fold_ids):
        assert not lab & f
        for g in fold_ids[i + 1:]:
            assert not f & g
    assert lab.union(*fold_ids) == {f"r{i}" for i in range(n)}
    sizes = [len(f) for f in part.folds]
    assert max(sizes) - min(sizes) <= 1
    prev = set()
    for t in range(1, sched.t_max + 1):
        cur = ids(pool_at(part, sched, t))
        assert prev <= cur
        prev = cur


def test_inject_unseen_grows_cumulatively():
    part = make_partition(dummy_manifest(150, 150), 0.1, 3, seed=0)
    sched = GenerationSchedule.default(3)
    pools = {t: pool_at(part, sched, t) for t in (1, 2, 3)}
    extra = [SampleRecord(f"x{i}", "x.png", 2 + i % 4, f"other{i % 4}") for i in range(120)]
    out = inject_unseen(pools, extra, sched, 3, seed=0)
    for t in (1, 2, 3):
        added = [r for r in out[t] if r.injected]
        assert len(added) == 40 * t
        assert all(r.label is None and r.split == "train" for r in added)
    assert inject_unseen(pools, [], sched, 3) == pools


def test_injected_records_never_in_test_splits():
    data = synth_dataset(per_class=30, val_per_class=5, test_per_class_per_site=5, seed=0)
    extra = synth_dataset(classes=(2, 3), per_class=12, val_per_class=0, test_per_class_per_site=0,
                          seed=1, id_prefix="unseen-")
    part = make_partition(data.records, 0.1, 3, seed=0)
    sched = GenerationSchedule.default(3)
    pools = inject_unseen({t: pool_at(part, sched, t) for t in (1, 2, 3)}, extra.records, sched, 3)
    injected = {r.id for r in pools[3] if r.injected}
    scored = {r.id for r in data.records if r.split != "train"}
    assert injected and not injected & scored


def test_corrupt_identity_and_full_flip():
    recs = dummy_manifest(50, 50)
    assert [r.label for r in corrupt_labels(recs, 0.0)] == [r.label for r in recs]
    flipped = corrupt_labels(recs, 1.0, seed=3)
    assert all(a.label != b.label for a, b in zip(recs, flipped))
    assert all(b.class_name == ("tb" if b.label == 1 else "normal") for b in flipped)
    assert [r.id for r in flipped] == [r.id for r in recs]
    assert [r.image_path for r in flipped] == [r.image_path for r in recs]
    with pytest.raises(InvalidConfigError):
        corrupt_labels(recs, 1.5)


def test_corrupt_multiclass_draws_a_different_label():
    recs = [SampleRecord(f"r{i}", "p", i % 4, f"c{i % 4}") for i in range(400)]
    out = corrupt_labels(recs, 1.0, seed=0)
    assert all(a.label != b.label for a, b in zip(recs, out))
    assert {b.label for b in out} == {0, 1, 2, 3}


def test_corrupt_rate_binomial_bound():
    recs = dummy_manifest(5000, 5000)
    out = corrupt_labels(recs, 0.05, seed=12)
    flips = sum(a.label != b.label for a, b in zip(recs, out))
    sigma = np.sqrt(10_000 * 0.05 * 0.95)
    assert abs(flips - 500) <= 3 * sigma
    assert recs[0].label == 1  # original untouched


def test_manifest_roundtrip(tmp_path):
    recs = [
        SampleRecord("a", str(tmp_path / "a.png"), 1, "tb", "site_a", "external_test"),
        SampleRecord("b", str(tmp_path / "b.png"), None, None, None, "train"),
    ]
    write_manifest(recs, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text(encoding="utf-8")
    assert text.splitlines()[0] == "id,image_path,label,class_name,site,split"
    assert text.splitlines()[2] == "b,b.png,,,,train"
    assert read_manifest(tmp_path / "m.csv") == recs


def test_partition_files_roundtrip(tmp_path):
    recs = dummy_manifest(40, 60)
    part = make_partition(recs, 0.1, 3, seed=2)
    part.save(tmp_path)
    again = DataPartition.load(tmp_path, recs)
    assert [r.id for r in again.labeled] == [r.id for r in part.labeled]
    assert [[r.id for r in f] for f in again.folds] == [[r.id for r in f] for f in part.folds]
    assert (tmp_path / "fold_3.txt").exists()


def test_partition_deterministic():
    recs = dummy_manifest(40, 60)
    a, b = make_partition(recs, 0.1, 3, seed=9), make_partition(recs, 0.1, 3, seed=9)
    assert a.membership() == b.membership()


def test_synth_size_and_determinism():
    a = synth_dataset(per_class=1000, val_per_class=0, test_per_class_per_site=0, seed=3)
    assert len(a.records) == 2000 and len(a.images) == 2000 and len(a.masks) == 2000
    b = synth_dataset(per_class=1000, val_per_class=0, test_per_class_per_site=0, seed=3)
    assert all(a.images[k].tobytes() == b.images[k].tobytes() for k in a.images)
    pos = [r for r in a.records if r.label == 1]
    assert all(a.masks[r.id].any() for r in pos)
    assert not any(a.masks[r.id].any() for r in a.records if r.label == 0)
