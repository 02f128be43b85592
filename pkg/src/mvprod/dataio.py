"""Synthetic hierarchical dataset, on-disk formats, splits, batching.

A dataset directory contains:

* ``dataset.json``      - dims, pair count, ontology labels, generator echo
* ``manifest.tsv``      - one row per pair: id, level-1 id, level-2 id, and
  the byte offset of the pair's vector in each feature file
* four feature files    - ``mv_visual.bin``, ``mv_text.bin``,
  ``prod_visual.bin``, ``prod_text.bin``

Feature files are little-endian float32, a 16-byte header
(magic ``MVPF``, version, count, dim) and a trailing CRC32 of
header+payload. Everything is deterministic per seed.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MVPF"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIII")

FEATURE_FILES = ("mv_visual", "mv_text", "prod_visual", "prod_text")


class DataFormatError(RuntimeError):
    """Corrupt, truncated, or unsupported dataset files."""


@dataclass
class Ontology:
    """Two-level category tree: coarse parents over middle children."""

    level1_labels: dict[int, str]
    level2_labels: dict[int, str]
    parent: dict[int, int]  # level-2 id -> level-1 id

    @classmethod
    def regular(cls, level1_count: int, children_per_node: int) -> "Ontology":
        level1 = {i: f"coarse-{i}" for i in range(level1_count)}
        level2: dict[int, str] = {}
        parent: dict[int, int] = {}
        for i in range(level1_count):
            for j in range(children_per_node):
                cid = i * children_per_node + j
                level2[cid] = f"middle-{i}-{j}"
                parent[cid] = i
        return cls(level1, level2, parent)

    @property
    def level2_ids(self):
        return sorted(self.level2_labels)

    def path_for(self, level2_id: int) -> tuple[int, int]:
        return (self.parent[level2_id], level2_id)


@dataclass
class GenConfig:
    n_pairs: int = 2000
    level1_count: int = 6
    children_per_node: int = 5
    latent_dim: int = 64
    visual_dim: int = 2048
    text_dim: int = 768
    product_noise: float = 0.25  # latent jitter off the category prototype
    clutter: float = 0.3  # unrelated-prototype bleed into microvideo latents
    feature_noise: float = 0.1  # additive noise after the modality maps
    zipf_exponent: float = 1.0  # long-tail skew over level-2 categories
    seed: int = 1

    def validate(self) -> None:
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        for name in ("product_noise", "clutter", "feature_noise", "zipf_exponent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def synthesize(cfg: GenConfig) -> dict:
    """Draw the synthetic corpus into memory.

    Per level-2 category a latent prototype; per pair a product latent
    (prototype + jitter) mapped into both modality spaces, and a
    microvideo latent that additionally bleeds a random unrelated
    category's prototype into the signal before mapping.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    onto = Ontology.regular(cfg.level1_count, cfg.children_per_node)
    cat_ids = onto.level2_ids
    n_cats = len(cat_ids)

    prototypes = rng.standard_normal((n_cats, cfg.latent_dim))

    ranks = np.arange(1, n_cats + 1, dtype=np.float64)
    zipf = ranks**-cfg.zipf_exponent
    zipf /= zipf.sum()
    cats = rng.choice(n_cats, size=cfg.n_pairs, p=zipf)

    map_visual = rng.standard_normal((cfg.latent_dim, cfg.visual_dim)) / np.sqrt(cfg.latent_dim)
    map_text = rng.standard_normal((cfg.latent_dim, cfg.text_dim)) / np.sqrt(cfg.latent_dim)

    latents = prototypes[cats] + cfg.product_noise * rng.standard_normal((cfg.n_pairs, cfg.latent_dim))
    if n_cats > 1:
        offsets = rng.integers(1, n_cats, size=cfg.n_pairs)
        other = (cats + offsets) % n_cats
    else:
        other = cats
    mv_latents = latents + cfg.clutter * prototypes[other]

    def _features(lat, mapping, dim):
        return (lat @ mapping + cfg.feature_noise * rng.standard_normal((cfg.n_pairs, dim))).astype(np.float32)

    return {
        "ontology": onto,
        "paths": np.asarray([onto.path_for(int(c)) for c in cats], dtype=np.int64),
        "latents": latents,
        "mv_latents": mv_latents,
        "prototypes": prototypes,
        "mv_visual": _features(mv_latents, map_visual, cfg.visual_dim),
        "mv_text": _features(mv_latents, map_text, cfg.text_dim),
        "prod_visual": _features(latents, map_visual, cfg.visual_dim),
        "prod_text": _features(latents, map_text, cfg.text_dim),
    }


# ---------------------------------------------------------------------------
# binary feature files
# ---------------------------------------------------------------------------


def write_feature_file(path: Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    count, dim = matrix.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, count, dim)
    payload = matrix.tobytes()
    crc = zlib.crc32(payload, zlib.crc32(header))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_feature_file(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise DataFormatError(f"{path}: file too short for a feature header")
    magic, version, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature-file version {version}")
    expected = _HEADER.size + count * dim * 4 + 4
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: dimension disagreement: header says {count}x{dim} "
            f"({expected} bytes) but file has {len(raw)} bytes"
        )
    payload = raw[_HEADER.size : -4]
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    crc = zlib.crc32(payload, zlib.crc32(raw[: _HEADER.size]))
    if crc != crc_stored:
        raise DataFormatError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    ids: np.ndarray  # (N,) pair ids
    paths: np.ndarray  # (N, 2) level-1/level-2 ids
    mv_visual: np.ndarray
    mv_text: np.ndarray
    prod_visual: np.ndarray
    prod_text: np.ndarray
    ontology: Ontology
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def visual_dim(self) -> int:
        return self.mv_visual.shape[1]

    @property
    def text_dim(self) -> int:
        return self.mv_text.shape[1]


def generate(cfg: GenConfig, out_dir) -> Path:
    """Write a full dataset directory; byte-identical per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = synthesize(cfg)
    onto: Ontology = data["ontology"]

    matrices = {name: data[name] for name in FEATURE_FILES}
    for name, matrix in matrices.items():
        write_feature_file(out / f"{name}.bin", matrix)

    lines = [f"# mvprod-manifest\tversion={MANIFEST_VERSION}"]
    lines.append("# pair_id\tlevel1\tlevel2\t" + "\t".join(f"off_{n}" for n in FEATURE_FILES))
    for idx in range(cfg.n_pairs):
        offs = [_HEADER.size + idx * matrices[n].shape[1] * 4 for n in FEATURE_FILES]
        l1, l2 = data["paths"][idx]
        lines.append("\t".join(str(v) for v in (idx, l1, l2, *offs)))
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")

    descriptor = {
        "format_version": MANIFEST_VERSION,
        "n_pairs": cfg.n_pairs,
        "visual_dim": cfg.visual_dim,
        "text_dim": cfg.text_dim,
        "ontology": {
            "level1": {str(k): v for k, v in onto.level1_labels.items()},
            "level2": {str(k): v for k, v in onto.level2_labels.items()},
            "parent": {str(k): v for k, v in onto.parent.items()},
        },
        "generator": asdict(cfg),
    }
    (out / "dataset.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
    return out


def load(data_dir) -> Dataset:
    """Load and verify a dataset directory."""
    root = Path(data_dir)
    descriptor_path = root / "dataset.json"
    manifest_path = root / "manifest.tsv"
    if not descriptor_path.exists() or not manifest_path.exists():
        raise DataFormatError(f"{root}: not a dataset directory (missing manifest or descriptor)")
    meta = json.loads(descriptor_path.read_text())

    lines = manifest_path.read_text().splitlines()
    if not lines or not lines[0].startswith("# mvprod-manifest"):
        raise DataFormatError(f"{manifest_path}: missing manifest header")
    try:
        version = int(lines[0].rsplit("version=", 1)[1])
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"{manifest_path}: malformed version tag") from exc
    if version != MANIFEST_VERSION:
        raise DataFormatError(f"{manifest_path}: unsupported manifest version {version}")

    rows = [ln.split("\t") for ln in lines if ln and not ln.startswith("#")]
    ids = np.asarray([int(r[0]) for r in rows], dtype=np.int64)
    paths = np.asarray([[int(r[1]), int(r[2])] for r in rows], dtype=np.int64)

    matrices = {}
    for col, name in enumerate(FEATURE_FILES):
        matrix = read_feature_file(root / f"{name}.bin")
        if not np.all(np.isfinite(matrix)):
            raise DataFormatError(f"{name}.bin: non-finite feature values")
        if matrix.shape[0] != len(rows):
            raise DataFormatError(f"{name}.bin: {matrix.shape[0]} rows but manifest has {len(rows)}")
        expect_dim = meta["visual_dim"] if "visual" in name else meta["text_dim"]
        if matrix.shape[1] != expect_dim:
            raise DataFormatError(f"{name}.bin: dimension disagreement {matrix.shape[1]} != {expect_dim}")
        for idx, row in enumerate(rows):
            offset = int(row[3 + col])
            if offset != _HEADER.size + idx * matrix.shape[1] * 4:
                raise DataFormatError(f"{name}.bin: manifest offset mismatch at pair {row[0]}")
        matrices[name] = matrix

    onto = Ontology(
        level1_labels={int(k): v for k, v in meta["ontology"]["level1"].items()},
        level2_labels={int(k): v for k, v in meta["ontology"]["level2"].items()},
        parent={int(k): v for k, v in meta["ontology"]["parent"].items()},
    )
    return Dataset(ids=ids, paths=paths, ontology=onto, meta=meta, **matrices)


@dataclass
class InstancePair:
    pair_id: int
    mv_visual: np.ndarray
    mv_text: np.ndarray
    prod_visual: np.ndarray
    prod_text: np.ndarray
    path: tuple[int, int]


def get_pair(dataset: Dataset, index: int) -> InstancePair:
    return InstancePair(
        pair_id=int(dataset.ids[index]),
        mv_visual=dataset.mv_visual[index],
        mv_text=dataset.mv_text[index],
        prod_visual=dataset.prod_visual[index],
        prod_text=dataset.prod_text[index],
        path=(int(dataset.paths[index, 0]), int(dataset.paths[index, 1])),
    )


# ---------------------------------------------------------------------------
# splits and batches
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def split_dataset(n_pairs: int, seed: int) -> DatasetSplit:
    """Random 3:1:1 partition of indices; remainder stays in train."""
    if n_pairs < 5:
        raise ValueError("split needs at least 5 pairs")
    perm = np.random.default_rng(seed).permutation(n_pairs)
    n_val = n_pairs // 5
    n_test = n_pairs // 5
    n_train = n_pairs - n_val - n_test
    return DatasetSplit(
        train=perm[:n_train],
        val=perm[n_train : n_train + n_val],
        test=perm[n_train + n_val :],
        seed=seed,
    )


def batches_per_epoch(train_size: int, batch_size: int) -> int:
    if batch_size > train_size:
        raise ValueError(f"batch size {batch_size} exceeds train size {train_size}")
    return train_size // batch_size


def batch_indices(split: DatasetSplit, step: int, batch_size: int, shuffle_seed: int) -> np.ndarray:
    """Training indices for one step: epoch-wise shuffled, ragged tail
    dropped, deterministic per (shuffle_seed, epoch)."""
    per_epoch = batches_per_epoch(len(split.train), batch_size)
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng((shuffle_seed, epoch)).permutation(len(split.train))
    chosen = perm[slot * batch_size : (slot + 1) * batch_size]
    return split.train[chosen]
