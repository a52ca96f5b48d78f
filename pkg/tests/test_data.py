import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locfuse.data import (AugmentConfig, PromptDatabase, PromptPair, TaskKind, TaskSpec, augment, bounding_box,
                          generate_dataset, load_dataset, luminance, make_pair, read_image, retrieve_topN, save_dataset,
                          write_image)
from locfuse.errors import CapacityError, ConfigError, ModeError


@pytest.fixture(scope="module")
def small_db():
    train, test = generate_dataset(TaskSpec(n_train=40, n_test=8, seed=3))
    return train, test


def toy_db(n=10, seed=0, size=4):
    rng = np.random.default_rng(seed)
    pairs = [PromptPair(rng.random((size, size, 3)).astype(np.float32), np.zeros((size, size, 3), np.float32),
                        f"p{i:02d}", i % 3) for i in range(n)]
    return PromptDatabase(pairs)


def test_seg_labels_are_binary():
    train, test = generate_dataset(TaskSpec(TaskKind.SEGMENTATION, n_train=30, n_test=5))
    for p in train.pairs + test:
        assert set(np.unique(p.label)) <= {0.0, 1.0}
        assert p.image.shape == p.label.shape == (32, 32, 3)


def test_det_label_is_bbox_of_seg_mask():
    for seed in range(20):
        rng_a, rng_b = np.random.default_rng(seed), np.random.default_rng(seed)
        seg = make_pair(rng_a, TaskSpec(TaskKind.SEGMENTATION), 2, "a")
        det = make_pair(rng_b, TaskSpec(TaskKind.DETECTION), 2, "a")
        np.testing.assert_array_equal(seg.image, det.image)
        mask = seg.label[..., 0] > 0.5
        rows, cols = np.nonzero(mask)
        oracle = np.zeros_like(mask)
        oracle[rows.min(): rows.max() + 1, cols.min(): cols.max() + 1] = True
        np.testing.assert_array_equal(det.label[..., 0] > 0.5, oracle)
        np.testing.assert_array_equal(bounding_box(mask), oracle)


def test_color_image_is_label_luminance():
    train, _ = generate_dataset(TaskSpec(TaskKind.COLORIZATION, n_train=20, n_test=2))
    for p in train.pairs:
        np.testing.assert_allclose(p.image, luminance(p.label), atol=1e-6)
        assert np.array_equal(p.image[..., 0], p.image[..., 1]) and np.array_equal(p.image[..., 1], p.image[..., 2])


def test_generation_is_deterministic_and_splits_disjoint():
    a_train, a_test = generate_dataset(TaskSpec(n_train=25, n_test=6, seed=9))
    b_train, b_test = generate_dataset(TaskSpec(n_train=25, n_test=6, seed=9))
    for x, y in zip(a_train.pairs + a_test, b_train.pairs + b_test):
        assert x.id == y.id and x.image.tobytes() == y.image.tobytes() and x.label.tobytes() == y.label.tobytes()
    assert not set(a_train.ids) & {p.id for p in a_test}


def test_zero_split_is_config_error():
    with pytest.raises(ConfigError):
        TaskSpec(n_train=0)
    with pytest.raises(ConfigError):
        TaskSpec(n_test=0)


def test_retrieval_examples(small_db):
    train, test = small_db
    q = train[7]
    assert retrieve_topN(q.image, train, 1)[0].id == q.id
    everything = retrieve_topN(test[0].image, train, len(train))
    assert sorted(p.id for p in everything) == sorted(train.ids)
    with pytest.raises(CapacityError):
        retrieve_topN(test[0].image, train, len(train) + 1)


def test_retrieval_matches_full_sort_oracle():
    db = toy_db(10)
    q = np.random.default_rng(42).random((4, 4, 3))
    qf = q.reshape(-1)
    sims = []
    for p in db.pairs:
        v = p.image.reshape(-1).astype(np.float64)
        sims.append((-(v @ qf) / (np.linalg.norm(v) * np.linalg.norm(qf)), p.id))
    oracle = [pid for _, pid in sorted(sims)]
    assert [p.id for p in retrieve_topN(q, db, 10)] == oracle


def test_retrieval_ties_break_by_id():
    img = np.full((4, 4, 3), 0.5, np.float32)
    pairs = [PromptPair(img * s, img, pid, 0) for pid, s in (("c", 1.0), ("a", 2.0), ("b", 0.5))]
    db = PromptDatabase(pairs)
    assert [p.id for p in retrieve_topN(img, db, 3)] == ["a", "b", "c"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 10))
def test_retrieval_pure_and_monotone(seed, n):
    db = toy_db(10, seed=seed % 7)
    q = np.random.default_rng(seed).random((4, 4, 3))
    first = retrieve_topN(q, db, n)
    assert [p.id for p in first] == [p.id for p in retrieve_topN(q, db, n)]
    sims = db.similarities(q)
    got = [sims[db.index_of(p.id)] for p in first]
    assert all(a >= b for a, b in zip(got, got[1:]))


def test_augment_examples():
    db = toy_db(10)
    prompts = db.pairs[:4]
    query = PromptPair(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4, 3), np.float32), "q", 0)
    assert augment(prompts, query, db, AugmentConfig(1.0, 0.0)) == [query] * 4
    assert augment(prompts, query, db, AugmentConfig(0.0, 0.0)) == prompts
    with pytest.raises(ModeError):
        augment(prompts, query, db, AugmentConfig(), mode="eval")
    with pytest.raises(ConfigError):
        AugmentConfig(0.7, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.6), st.floats(0, 0.4), st.integers(1, 6))
def test_augment_invariants(key, p_q, p_r, n):
    db = toy_db(10)
    query = PromptPair(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4, 3), np.float32), "q", 0)
    prompts = db.pairs[:n]
    cfg = AugmentConfig(p_q, p_r, seed=5)
    out = augment(prompts, query, db, cfg, key=key)
    assert len(out) == n
    allowed = {id(p) for p in db.pairs} | {id(query)}
    assert all(id(p) in allowed for p in out)
    assert out == augment(prompts, query, db, cfg, key=key)
    for before, after in zip(prompts, out):
        # a random substitution never returns the incumbent
        assert after is before or after is query or after.id != before.id


def test_augment_rate_monte_carlo():
    db = toy_db(10)
    query = PromptPair(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4, 3), np.float32), "q", 0)
    cfg = AugmentConfig(0.3, 0.0, seed=11)
    prompts = db.pairs[:4]
    hits = total = 0
    for key in range(25_000):
        out = augment(prompts, query, db, cfg, key=key)
        hits += sum(p is query for p in out)
        total += len(out)
    assert total == 100_000
    assert abs(hits / total - 0.3) <= 0.005


@pytest.mark.parametrize("ext", [".png", ".ppm"])
def test_dataset_roundtrip_bit_exact(tmp_path, ext):
    spec = TaskSpec(TaskKind.DETECTION, n_train=6, n_test=3, seed=4)
    train, test = generate_dataset(spec)
    save_dataset(tmp_path, spec, train, test, ext=ext)
    loaded = load_dataset(tmp_path)
    assert loaded.spec == spec
    for a, b in zip(train.pairs + test, loaded.train.pairs + loaded.test):
        assert a.id == b.id and a.class_tag == b.class_tag
        assert a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()
    assert (tmp_path / "train" / "pairs" / f"tr00000_img{ext}").exists()


def test_image_io_roundtrip(tmp_path):
    img = (np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255).astype(np.float32)
    for name in ("a.png", "a.ppm"):
        write_image(tmp_path / name, img)
        assert read_image(tmp_path / name).tobytes() == img.tobytes()


def test_load_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
