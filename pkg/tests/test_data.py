import numpy as np
import pytest

from convse.data import (FeatureTable, PairedDataset, SynthConfig, decode_feature_table, encode_feature_table,
                         folds, load_dataset_dir, load_feature_file, make_batches, split_counts, synth_generate,
                         write_dataset, write_feature_file)
from convse.errors import (ChecksumError, ConfigError, DataError, DuplicateIdError, FormatError,
                           TruncatedFileError, VersionError)
from convse.numerics import make_rng


def toy_dataset(n_images=2, per_image=5, split="train"):
    rng = make_rng(0)
    img_ids = [f"i{k}" for k in range(n_images)]
    cap_ids = [f"i{k}#{j}" for k in range(n_images) for j in range(per_image)]
    return PairedDataset(FeatureTable(img_ids, rng.standard_normal((n_images, 3))),
                         FeatureTable(cap_ids, rng.standard_normal((len(cap_ids), 2))),
                         {c: c.split("#")[0] for c in cap_ids}, {i: split for i in img_ids})


def test_feature_round_trip_lossless(tmp_path):
    rng = make_rng(1)
    table = FeatureTable(["a", "bé", "c#3"], rng.standard_normal((3, 4)))
    path = write_feature_file(table, tmp_path / "f.fvt")
    loaded = load_feature_file(path)
    assert loaded.ids == table.ids
    assert loaded.feats.tobytes() == table.feats.tobytes()
    write_feature_file(loaded, tmp_path / "g.fvt")
    assert (tmp_path / "g.fvt").read_bytes() == path.read_bytes()


def test_truncated_feature_file():
    table = FeatureTable(["a", "b", "c"], np.ones((3, 2)))
    data = encode_feature_table(table)
    row = 2 + 1 + 16
    # drop the last row but keep a checksum-sized tail, as a short write would
    short = data[:-4 - row] + data[-4:]
    with pytest.raises(TruncatedFileError, match="declares 3 rows but ends after 2"):
        decode_feature_table(short)


def test_feature_file_errors_are_distinct():
    data = bytearray(encode_feature_table(FeatureTable(["a", "b"], np.ones((2, 2)))))
    with pytest.raises(FormatError, match="magic"):
        decode_feature_table(b"NOPE" + bytes(data[4:]))
    bad = bytearray(data)
    bad[-6] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_feature_table(bytes(bad))
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(VersionError):
        decode_feature_table(bytes(bad))


def test_duplicate_id_named():
    with pytest.raises(DuplicateIdError, match="'x'"):
        FeatureTable(["x", "y", "x"], np.zeros((3, 2)))


def test_dataset_totality():
    ds = toy_dataset()
    with pytest.raises(DataError):
        PairedDataset(ds.images, ds.captions, {"i0#0": "i0"}, ds.split)
    bad = dict(ds.caption_to_image, **{"i0#0": "ghost"})
    with pytest.raises(DataError, match="ghost"):
        PairedDataset(ds.images, ds.captions, bad, ds.split)
    with pytest.raises(DataError, match="split"):
        PairedDataset(ds.images, ds.captions, ds.caption_to_image, {"i0": "train"})
    with pytest.raises(DataError):
        PairedDataset(ds.images, ds.captions, ds.caption_to_image, {"i0": "train", "i1": "holdout"})


def test_dataset_dir_round_trip(tmp_path):
    ds = synth_generate(SynthConfig(n_images=20, seed=3))
    write_dataset(ds, tmp_path / "d")
    back = load_dataset_dir(tmp_path / "d")
    assert back.images.ids == ds.images.ids
    assert back.caption_to_image == ds.caption_to_image
    assert back.split == ds.split
    np.testing.assert_array_equal(back.captions.feats, ds.captions.feats)
    with pytest.raises(DataError):
        load_dataset_dir(tmp_path / "missing")


def test_batches_drop_short_tail():
    ds = toy_dataset(n_images=2, per_image=5)
    sizes = [len(b) for b in make_batches(ds, "train", 4, make_rng(0))]
    assert sizes == [4, 4]


def test_batches_deterministic_and_cover():
    ds = synth_generate(SynthConfig(n_images=40, seed=1))
    a = [b.caption_rows.tolist() for b in make_batches(ds, "train", 8, make_rng(5))]
    b = [b.caption_rows.tolist() for b in make_batches(ds, "train", 8, make_rng(5))]
    c = [b.caption_rows.tolist() for b in make_batches(ds, "train", 8, make_rng(6))]
    assert a == b and a != c
    seen = sorted(r for batch in a for r in batch)
    assert seen == sorted(ds.pair_rows("train").tolist())


def test_batch_contents_are_aligned():
    ds = synth_generate(SynthConfig(n_images=20, seed=2))
    for batch in make_batches(ds, "train", 5, make_rng(0)):
        np.testing.assert_array_equal(batch.image_rows, ds.cap_img_rows[batch.caption_rows])
        np.testing.assert_array_equal(batch.image_feats, ds.images.feats[batch.image_rows])
        np.testing.assert_array_equal(batch.text_feats, ds.captions.feats[batch.caption_rows])
        assert all(ds.caption_split(ds.captions.ids[c]) == "train" for c in batch.caption_rows)


def test_batch_errors():
    ds = toy_dataset(split="train")
    with pytest.raises(DataError):
        next(make_batches(ds, "test", 2, make_rng(0)))
    with pytest.raises(ConfigError):
        next(make_batches(ds, "train", 1, make_rng(0)))
    with pytest.raises(DataError):
        ds.split_view("val")


def test_synth_identity_noiseless():
    ds = synth_generate(SynthConfig(latent_dim=6, img_dim=6, txt_dim=6, n_images=30, noise=0.0, maps="identity"))
    np.testing.assert_array_equal(ds.captions.feats, ds.images.feats[ds.cap_img_rows])


def test_synth_deterministic_and_shaped():
    cfg = SynthConfig(n_images=50, seed=9)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert a.images.feats.tobytes() == b.images.feats.tobytes()
    assert a.captions.feats.tobytes() == b.captions.feats.tobytes()
    assert a.images.feats.shape == (50, 64) and a.captions.feats.shape == (250, 48)
    counts = [len(a.image_rows(s)) for s in ("train", "val", "test")]
    assert tuple(counts) == split_counts(50) == (40, 5, 5)
    assert synth_generate(SynthConfig(n_images=50, seed=10)).images.feats.tobytes() != a.images.feats.tobytes()


@pytest.mark.parametrize("kw", [dict(latent_dim=0), dict(n_images=1), dict(noise=-1.0),
                                dict(maps="identity"), dict(maps="spiral")])
def test_synth_rejects_bad_config(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


def test_folds():
    ds = synth_generate(SynthConfig(n_images=100, seed=0))
    parts = folds(ds, "test", 5)
    assert len(parts) == 2
    assert parts[0].images.ids == [f"img{k:05d}" for k in range(90, 95)]
    assert len(parts[1].captions) == 25
    with pytest.raises(ConfigError):
        folds(ds, "test", 11)
