import os

import numpy as np
import pytest

from lipwords import ConfigError, DataError
from lipwords.data import (
    AugmentSpec,
    ClipDataset,
    DatasetManifest,
    augment,
    crop_mouth,
    dataset_digest,
    gen_synthetic,
    load_batches,
    normalize_clip,
    read_clip,
    read_landmarks,
    read_manifest,
    write_clip,
    write_manifest,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return gen_synthetic(root, vocab_size=4, clips_per_word=6, seed=11,
                         frames=20, frame_size=30)


# ---------------------------------------------------------------- clip files

def test_clip_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 256, size=(5, 8, 9), dtype=np.uint8)
    path = tmp_path / "x.clip"
    write_clip(path, frames, 3)
    back, label = read_clip(path)
    assert label == 3
    np.testing.assert_array_equal(back, frames)


def test_clip_record_carries_no_boundary_metadata(tmp_path):
    frames = np.zeros((5, 8, 9), dtype=np.uint8)
    path = tmp_path / "x.clip"
    write_clip(path, frames, 1)
    # exactly magic + 4 integers + pixels: no room for a temporal offset
    assert os.path.getsize(path) == 4 + 16 + 5 * 8 * 9


def test_truncated_clip_rejected(tmp_path):
    frames = np.zeros((5, 8, 9), dtype=np.uint8)
    path = tmp_path / "x.clip"
    write_clip(path, frames, 1)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(DataError):
        read_clip(path)


# ---------------------------------------------------------------- manifest

def test_manifest_roundtrip(tmp_path):
    manifest = DatasetManifest(5, 30, 30, 0.4, 0.2, ["aa", "bb"],
                               {"train": [("aa_0", 0), ("bb_0", 1)], "val": [("aa_1", 0)]})
    path = tmp_path / "manifest.txt"
    write_manifest(path, manifest)
    back = read_manifest(path)
    assert back == manifest


def test_manifest_rejects_overlapping_splits(tmp_path):
    manifest = DatasetManifest(5, 30, 30, 0.4, 0.2, ["aa"],
                               {"train": [("x", 0)], "val": [("x", 0)]})
    with pytest.raises(DataError, match="more than one split"):
        manifest.validate()


def test_manifest_rejects_out_of_range_label():
    manifest = DatasetManifest(5, 30, 30, 0.4, 0.2, ["aa"], {"train": [("x", 4)]})
    with pytest.raises(DataError, match="outside the vocabulary"):
        manifest.validate()


def test_manifest_rejects_zero_std():
    manifest = DatasetManifest(5, 30, 30, 0.4, 0.0, ["aa"], {"train": [("x", 0)]})
    with pytest.raises(DataError, match="std"):
        manifest.validate()


# ---------------------------------------------------------------- crop

def _synthetic_face(t=4, h=60, w=80, blob=(40, 30)):
    frames = np.zeros((t, h, w), dtype=np.uint8)
    by, bx = blob
    frames[:, by - 4:by + 4, bx - 4:bx + 4] = 200
    marks = np.zeros((t, 66, 2))
    marks[:, :, 0] = np.linspace(10, 70, 66)  # x
    marks[:, :, 1] = np.linspace(5, 55, 66)   # y
    # mouth landmarks ring the blob
    angles = np.linspace(0, 2 * np.pi, 18, endpoint=False)
    marks[:, 48:66, 0] = bx + 6 * np.cos(angles)
    marks[:, 48:66, 1] = by + 6 * np.sin(angles)
    return frames, marks


def test_crop_mouth_constant_landmarks_and_size():
    frames, marks = _synthetic_face()
    out = crop_mouth(frames, marks, out_size=22)
    assert out.shape == (4, 22, 22)
    # the bright mouth blob should dominate the crop center
    center = out[:, 8:14, 8:14].mean()
    assert center > out.mean()


def test_crop_mouth_median_robust_to_outlier_frame():
    frames, marks = _synthetic_face()
    noisy = marks.copy()
    noisy[2] += 25.0  # one bad frame
    clean = crop_mouth(frames, marks, out_size=22)
    robust = crop_mouth(frames, noisy, out_size=22)
    np.testing.assert_array_equal(clean, robust)


def test_crop_mouth_zero_area_box_rejected():
    frames, marks = _synthetic_face()
    marks[:, 48:66] = 7.0  # all mouth points identical
    with pytest.raises(DataError, match="zero area"):
        crop_mouth(frames, marks)


def test_read_landmarks(tmp_path):
    path = tmp_path / "lm.txt"
    frame = "\n".join(f"{i}.5 {i}.25" for i in range(66))
    path.write_text(frame + "\n\n" + frame + "\n")
    marks = read_landmarks(path)
    assert marks.shape == (2, 66, 2)
    assert marks[0, 1, 0] == 1.5 and marks[1, 65, 1] == 65.25

    path.write_text("1 2\n3 4\n")
    with pytest.raises(DataError, match="66"):
        read_landmarks(path)


# ---------------------------------------------------------------- normalize

def test_normalize_train_split_stats(tiny_dataset):
    m = tiny_dataset.manifest
    values = []
    for clip_id, _ in tiny_dataset.split("train"):
        frames, _ = tiny_dataset.load(clip_id)
        values.append(normalize_clip(frames, m))
    flat = np.concatenate([v.ravel() for v in values])
    assert abs(flat.mean()) < 1e-3
    assert abs(flat.var() - 1.0) < 1e-3


def test_val_and_test_reuse_train_stats(tiny_dataset):
    # one scalar mean/std pair lives in the manifest: whatever split a
    # clip comes from, normalization uses the same (train) statistics
    m = tiny_dataset.manifest
    frames, _ = tiny_dataset.load(tiny_dataset.split("val")[0][0])
    normalized = normalize_clip(frames, m)
    expected = (frames.astype(np.float32) / 255.0 - np.float32(m.mean)) / np.float32(m.std)
    np.testing.assert_array_equal(normalized, expected)


# ---------------------------------------------------------------- augment

def test_augment_center_crop_when_disabled():
    frames = np.arange(3 * 20 * 20, dtype=np.uint8).reshape(3, 20, 20)
    out = augment(frames, None, AugmentSpec(enabled=False))
    np.testing.assert_array_equal(out, frames[:, 5:15, 5:15])


def test_double_flip_is_identity():
    frames = np.random.default_rng(1).integers(0, 256, (3, 12, 12), dtype=np.uint8)
    flipped = frames[:, :, ::-1]
    np.testing.assert_array_equal(flipped[:, :, ::-1], frames)


def test_augment_shares_offset_and_flip_across_frames():
    # encode the source row/column position in the pixel values so the
    # applied offset can be recovered per frame
    t, size = 8, 30
    frames = np.tile((np.arange(size, dtype=np.uint8) * 7 % 251)[None, None, :], (t, size, 1))
    rng = np.random.default_rng(3)
    out = augment(frames, rng, AugmentSpec())
    for frame in out[1:]:
        np.testing.assert_array_equal(frame, out[0])


def test_augment_deterministic_given_rng_state():
    frames = np.random.default_rng(2).integers(0, 256, (4, 30, 30), dtype=np.uint8)
    a = augment(frames, np.random.default_rng(77), AugmentSpec())
    b = augment(frames, np.random.default_rng(77), AugmentSpec())
    np.testing.assert_array_equal(a, b)


def test_augment_rejects_small_frames():
    with pytest.raises(DataError):
        augment(np.zeros((2, 8, 8), dtype=np.uint8), np.random.default_rng(0), AugmentSpec())


# ---------------------------------------------------------------- synthetic

def test_synthetic_same_seed_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    gen_synthetic(a, vocab_size=3, clips_per_word=4, seed=5, frames=18, frame_size=26)
    gen_synthetic(b, vocab_size=3, clips_per_word=4, seed=5, frames=18, frame_size=26)
    assert dataset_digest(a) == dataset_digest(b)
    gen_synthetic(str(b) + "2", vocab_size=3, clips_per_word=4, seed=6, frames=18, frame_size=26)
    assert dataset_digest(str(b) + "2") != dataset_digest(a)


def test_synthetic_split_arithmetic(tmp_path):
    ds = gen_synthetic(tmp_path / "d", vocab_size=10, clips_per_word=60, seed=1,
                       frames=20, frame_size=24)
    m = ds.manifest
    assert len(m.vocab) == 10
    assert len(m.splits["train"]) == 500
    assert len(m.splits["val"]) == 50
    assert len(m.splits["test"]) == 50
    for word in range(10):
        assert sum(1 for _, lab in m.splits["train"] if lab == word) == 50
        assert sum(1 for _, lab in m.splits["val"] if lab == word) == 5
        assert sum(1 for _, lab in m.splits["test"] if lab == word) == 5


def test_synthetic_minimal_pair_words(tiny_dataset):
    vocab = tiny_dataset.manifest.vocab
    assert vocab[-1] == vocab[-2] + "s"


def test_same_word_clips_differ_by_offset_and_noise(tiny_dataset):
    ids = [cid for cid, lab in tiny_dataset.split("train") if lab == 0][:2]
    a, _ = tiny_dataset.load(ids[0])
    b, _ = tiny_dataset.load(ids[1])
    assert not np.array_equal(a, b)


def test_nearest_neighbor_oracle_beats_chance(tiny_dataset):
    from lipwords.evaluate import nearest_neighbor_scores, topn

    scores = nearest_neighbor_scores(tiny_dataset)
    assert topn(scores, 1) > 1.0 / len(tiny_dataset.manifest.vocab)


# ---------------------------------------------------------------- batching

def test_load_batches_shapes_and_eval_determinism(tiny_dataset):
    batches = list(load_batches(tiny_dataset, "val", 3))
    total = sum(len(labels) for _, labels in batches)
    assert total == len(tiny_dataset.split("val"))
    clips, labels = batches[0]
    crop_h, crop_w = tiny_dataset.manifest.crop_size()
    assert clips.shape == (3, 1, tiny_dataset.manifest.frames, crop_h, crop_w)
    again = list(load_batches(tiny_dataset, "val", 3))
    np.testing.assert_array_equal(batches[0][0].data, again[0][0].data)


def test_load_batches_train_order_is_seeded(tiny_dataset):
    def order(seed):
        rng = np.random.default_rng(seed)
        return [labels.tolist()
                for _, labels in load_batches(tiny_dataset, "train", 4, rng=rng,
                                              augment_spec=AugmentSpec())]

    assert order(5) == order(5)
    assert order(5) != order(6)


def test_load_batches_drops_trailing_singleton_in_train_mode(tiny_dataset):
    n_train = len(tiny_dataset.split("train"))  # 4 words x 4 train clips = 16
    batch = n_train - 1  # forces a trailing batch of exactly 1
    rng = np.random.default_rng(0)
    sizes = [len(labels) for _, labels in
             load_batches(tiny_dataset, "train", batch, rng=rng, augment_spec=AugmentSpec())]
    assert sizes == [batch]
    # eval mode keeps everything
    sizes = [len(labels) for _, labels in load_batches(tiny_dataset, "train", batch)]
    assert sizes == [batch, 1]


def test_load_batches_unknown_split(tiny_dataset):
    with pytest.raises(DataError):
        list(load_batches(tiny_dataset, "nope", 2))


def test_full_size_batch_extents(tmp_path):
    ds = gen_synthetic(tmp_path / "full", vocab_size=2, clips_per_word=3, seed=2)
    clips, _ = next(load_batches(ds, "train", 2))
    assert clips.shape == (1, 1, 31, 112, 112) or clips.shape == (2, 1, 31, 112, 112)
    assert clips.shape[3:] == (112, 112)
