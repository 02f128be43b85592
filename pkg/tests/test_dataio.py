"""Generator determinism, file formats, splits, and batching."""

import struct

import numpy as np
import pytest

from mvprod import dataio
from mvprod.dataio import (
    DataFormatError,
    DatasetSplit,
    GenConfig,
    Ontology,
    batch_indices,
    batches_per_epoch,
    generate,
    get_pair,
    load,
    read_feature_file,
    split_dataset,
    synthesize,
    write_feature_file,
)

SMALL = dict(n_pairs=60, visual_dim=24, text_dim=12, latent_dim=8)


def test_ontology_regular_shape():
    onto = Ontology.regular(6, 5)
    assert len(onto.level1_labels) == 6
    assert len(onto.level2_labels) == 30
    assert all(onto.parent[c] == c // 5 for c in onto.level2_ids)
    assert onto.path_for(17) == (3, 17)


def test_generate_deterministic_bytes(tmp_path):
    cfg = GenConfig(seed=5, **SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    generate(cfg, a)
    generate(cfg, b)
    for name in (*(f"{n}.bin" for n in dataio.FEATURE_FILES), "manifest.tsv", "dataset.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_generate_zero_noise_latents_identical():
    cfg = GenConfig(seed=2, clutter=0.0, feature_noise=0.0, product_noise=0.3, **SMALL)
    data = synthesize(cfg)
    assert np.array_equal(data["latents"], data["mv_latents"])
    assert np.array_equal(data["mv_visual"], data["prod_visual"])


def test_generate_accounting(tmp_path):
    cfg = GenConfig(seed=1, n_pairs=200, visual_dim=24, text_dim=12, latent_dim=8)
    out = generate(cfg, tmp_path / "d")
    rows = [ln for ln in (out / "manifest.tsv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 200
    cats = {int(r.split("\t")[2]) for r in rows}
    assert cats <= set(range(30))


def test_roundtrip_bit_exact(tmp_path):
    cfg = GenConfig(seed=9, **SMALL)
    out = generate(cfg, tmp_path / "d")
    data = synthesize(cfg)
    ds = load(out)
    for name in dataio.FEATURE_FILES:
        assert np.array_equal(getattr(ds, name), data[name]), name
    assert np.array_equal(ds.paths, data["paths"])


def test_feature_file_roundtrip_10k_vectors(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((10_000, 17)).astype(np.float32)
    path = tmp_path / "f.bin"
    write_feature_file(path, mat)
    assert np.array_equal(read_feature_file(path), mat)


def test_feature_file_crc_detects_corruption(tmp_path):
    path = tmp_path / "f.bin"
    write_feature_file(path, np.ones((4, 3), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="checksum"):
        read_feature_file(path)


def test_feature_file_truncation_is_dimension_disagreement(tmp_path):
    path = tmp_path / "f.bin"
    write_feature_file(path, np.ones((4, 3), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataFormatError, match="dimension disagreement"):
        read_feature_file(path)


def test_feature_file_bad_magic_and_version(tmp_path):
    path = tmp_path / "f.bin"
    write_feature_file(path, np.ones((2, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="version"):
        read_feature_file(path)
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="magic"):
        read_feature_file(path)


def test_load_unknown_manifest_version(tmp_path):
    cfg = GenConfig(seed=1, **SMALL)
    out = generate(cfg, tmp_path / "d")
    manifest = out / "manifest.tsv"
    text = manifest.read_text().replace("version=1", "version=9")
    manifest.write_text(text)
    with pytest.raises(DataFormatError, match="unsupported manifest version"):
        load(out)


def test_load_missing_directory(tmp_path):
    with pytest.raises(DataFormatError):
        load(tmp_path / "nope")


def test_load_rejects_nonfinite_features(tmp_path):
    cfg = GenConfig(seed=6, **SMALL)
    out = generate(cfg, tmp_path / "d")
    mat = read_feature_file(out / "mv_text.bin")
    mat[0, 0] = np.nan
    write_feature_file(out / "mv_text.bin", mat)  # valid CRC, bad value
    with pytest.raises(DataFormatError, match="non-finite"):
        load(out)


def test_get_pair_view(tmp_path):
    cfg = GenConfig(seed=4, **SMALL)
    ds = load(generate(cfg, tmp_path / "d"))
    pair = get_pair(ds, 3)
    assert pair.pair_id == 3
    assert pair.mv_visual.shape == (24,)
    assert pair.path in {(l1, l2) for l2, l1 in ds.ontology.parent.items()}


def test_split_exact_ratio():
    s = split_dataset(1000, seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (600, 200, 200)


def test_split_remainder_to_train():
    s = split_dataset(7, seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (5, 1, 1)


def test_split_deterministic_and_partition():
    for n in (5, 6, 7, 23, 100, 999):
        for seed in (0, 1, 7):
            a = split_dataset(n, seed)
            b = split_dataset(n, seed)
            assert np.array_equal(a.train, b.train)
            assert np.array_equal(a.val, b.val)
            assert np.array_equal(a.test, b.test)
            union = np.concatenate([a.train, a.val, a.test])
            assert len(union) == n
            assert len(np.unique(union)) == n


def test_split_minimum_size():
    with pytest.raises(ValueError):
        split_dataset(4, seed=0)


def test_batches_per_epoch_and_ragged_drop():
    assert batches_per_epoch(600, 64) == 9
    with pytest.raises(ValueError):
        batches_per_epoch(10, 64)


def test_batch_indices_deterministic_partition():
    split = DatasetSplit(train=np.arange(130), val=np.arange(130, 160), test=np.arange(160, 190), seed=0)
    per_epoch = batches_per_epoch(130, 32)
    assert per_epoch == 4
    seen = []
    for step in range(per_epoch):
        idx = batch_indices(split, step, 32, shuffle_seed=3)
        assert len(idx) == 32
        seen.extend(idx.tolist())
    assert len(set(seen)) == len(seen)  # no duplicates within an epoch
    again = [batch_indices(split, s, 32, shuffle_seed=3).tolist() for s in range(per_epoch)]
    assert again == [batch_indices(split, s, 32, shuffle_seed=3).tolist() for s in range(per_epoch)]
    # different epoch, different permutation
    assert batch_indices(split, per_epoch, 32, shuffle_seed=3).tolist() != again[0]


def test_generator_separability_monotone_in_noise():
    # nearest-prototype classification of product latents: perfect at
    # zero noise, degrading (statistically over seeds) as jitter grows
    def accuracy(noise, seed):
        cfg = GenConfig(
            seed=seed, n_pairs=300, latent_dim=8, visual_dim=8, text_dim=8, product_noise=noise
        )
        data = synthesize(cfg)
        protos = data["prototypes"]
        cats = data["paths"][:, 1]
        d2 = ((data["latents"][:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
        return float((d2.argmin(axis=1) == cats).mean())

    levels = [0.0, 0.8, 2.0]
    means = [np.mean([accuracy(nz, seed) for seed in range(5)]) for nz in levels]
    assert means[0] == 1.0
    assert means[0] >= means[1] >= means[2] - 1e-9
    assert means[2] < 1.0


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(n_pairs=0).validate()
    with pytest.raises(ValueError):
        GenConfig(clutter=-0.1).validate()
