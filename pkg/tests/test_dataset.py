import numpy as np
import pytest

from ata.dataset import (
    FeatureMatrix,
    Manifest,
    ManifestRecord,
    SubsampleSpec,
    partition,
    read_features,
    subsample,
    write_features,
)
from ata.errors import DataError


def make_manifest(counts, split=None, modalities=("vision",)):
    """counts: {label: n}. Ids are label-prefixed and unique across labels."""
    records = []
    for label, n in counts.items():
        for i in range(n):
            for modality in modalities:
                records.append(
                    ManifestRecord(id=f"{label}{i:05d}", modality=modality, label=label, split=split)
                )
    return Manifest(records)


def split_sizes(manifest, label=None):
    return {s: len(manifest.ids(split=s, label=label)) for s in ("detector", "mlp", "validation")}


# --- partitioning --------------------------------------------------------------


def test_partition_100_samples():
    out = partition(make_manifest({"ID": 100}), seed=42)
    assert split_sizes(out) == {"detector": 50, "mlp": 25, "validation": 25}


def test_partition_minimum_stratum():
    out = partition(make_manifest({"ID": 4}), seed=0)
    assert split_sizes(out) == {"detector": 2, "mlp": 1, "validation": 1}


def test_partition_101_samples():
    out = partition(make_manifest({"ID": 101}), seed=3)
    sizes = split_sizes(out)
    assert sum(sizes.values()) == 101
    # floor/floor/remainder rounding
    assert sizes == {"detector": 50, "mlp": 25, "validation": 26}


def test_partition_small_stratum_rejected():
    with pytest.raises(DataError, match="need >= 4"):
        partition(make_manifest({"ID": 100, "FullOOD": 3}), seed=0)


def test_partition_stratified_per_label():
    out = partition(make_manifest({"ID": 40, "PartialOOD": 20, "FullOOD": 40}), seed=1)
    for label, n in (("ID", 40), ("PartialOOD", 20), ("FullOOD", 40)):
        sizes = split_sizes(out, label=label)
        assert sizes == {"detector": n // 2, "mlp": n // 4, "validation": n - n // 2 - n // 4}


def test_partition_leaves_test_split_untouched():
    records = make_manifest({"ID": 20}).records + make_manifest({"FullOOD": 10}, split="test").records
    out = partition(Manifest(records), seed=0)
    assert len(out.ids(split="test")) == 10
    assert set(out.ids(split="test")) == {f"FullOOD{i:05d}" for i in range(10)}


def test_partition_deterministic_in_seed():
    man = make_manifest({"ID": 60, "FullOOD": 30})
    a = partition(man, seed=5)
    b = partition(man, seed=5)
    c = partition(man, seed=6)
    key = lambda m: [(r.id, r.split) for r in m]
    assert key(a) == key(b)
    assert key(a) != key(c)


def test_partition_consistent_across_modalities():
    man = make_manifest({"ID": 20, "FullOOD": 10}, modalities=("vision", "text"))
    out = partition(man, seed=0)
    out.sample_table()  # raises on any vision/text disagreement


# --- subsampling ---------------------------------------------------------------


def test_subsample_identity():
    man = partition(make_manifest({"ID": 40}), seed=0)
    out = subsample(man, SubsampleSpec(fraction=1.0, seed=0))
    assert [(r.id, r.split) for r in out] == [(r.id, r.split) for r in man]


def test_subsample_64000_at_0_001():
    man = make_manifest({"ID": 64_000}, split="detector")
    out = subsample(man, SubsampleSpec(fraction=0.001, seed=0))
    assert len(out.ids(split="detector")) == 64


def test_subsample_rounding_never_below_one():
    man = make_manifest({"ID": 10}, split="detector")
    out = subsample(man, SubsampleSpec(fraction=0.001, seed=0))
    assert len(out.ids(split="detector")) == 1


def test_subsample_validation_untouched():
    man = partition(make_manifest({"ID": 40, "FullOOD": 40}), seed=0)
    out = subsample(man, SubsampleSpec(fraction=0.25, seed=1))
    assert out.ids(split="validation") == man.ids(split="validation")


def test_subsample_determinism_over_trials():
    man = partition(make_manifest({"ID": 100}), seed=0)
    base = set(subsample(man, SubsampleSpec(fraction=0.5, seed=0)).ids(split="detector"))
    differs = 0
    for trial in range(20):
        same = set(subsample(man, SubsampleSpec(fraction=0.5, seed=0)).ids(split="detector"))
        assert same == base
        other = set(subsample(man, SubsampleSpec(fraction=0.5, seed=trial + 1)).ids(split="detector"))
        differs += other != base
    assert differs >= 19  # colliding half-subsets of 50 ids are vanishingly unlikely


def test_subsample_bad_fraction():
    with pytest.raises(DataError):
        SubsampleSpec(fraction=0.0, seed=0)
    with pytest.raises(DataError):
        SubsampleSpec(fraction=1.5, seed=0)


# --- feature matrices and manifest IO ------------------------------------------


def test_feature_matrix_validation():
    with pytest.raises(DataError, match="empty matrix"):
        FeatureMatrix(data=np.empty((0, 768), dtype=np.float32), modality="vision", ids=[])
    with pytest.raises(DataError, match="non-finite"):
        FeatureMatrix(
            data=np.array([[1.0, np.inf]], dtype=np.float32), modality="vision", ids=["a"]
        )
    with pytest.raises(DataError, match="ids"):
        FeatureMatrix(data=np.ones((2, 3), dtype=np.float32), modality="vision", ids=["a"])
    flagged = FeatureMatrix(data=np.ones((1, 5), dtype=np.float32), modality="vision", ids=["a"])
    assert flagged.nonstandard_dim
    standard = FeatureMatrix(data=np.ones((1, 768), dtype=np.float32), modality="vision", ids=["a"])
    assert not standard.nonstandard_dim


def test_rows_for_order_and_missing(rng):
    m = FeatureMatrix(
        data=rng.standard_normal((4, 8)).astype(np.float32),
        modality="vision",
        ids=["a", "b", "c", "d"],
    )
    np.testing.assert_array_equal(m.rows_for(["c", "a"]), m.data[[2, 0]])
    with pytest.raises(DataError, match="'z' not present"):
        m.rows_for(["z"])


def test_features_round_trip(tmp_path, rng):
    m = FeatureMatrix(
        data=rng.standard_normal((6, 768)).astype(np.float32),
        modality="vision",
        ids=[f"s{i}" for i in range(6)],
    )
    write_features(m, tmp_path / "vision.ataf")
    back = read_features(tmp_path / "vision.ataf")
    assert back.modality == "vision"
    assert back.ids == m.ids
    assert back.data.tobytes() == m.data.tobytes()


def test_manifest_round_trip_preserves_extras(tmp_path):
    rec = ManifestRecord(
        id="s1", modality="vision", label="ID", split="detector",
        episode_id="ep7", suite="Goal", variant="swap", extra={"note": "x", "score": 1.5},
    )
    man = Manifest([rec])
    man.write(tmp_path / "m.jsonl")
    back = Manifest.read(tmp_path / "m.jsonl")
    assert back.records[0] == rec


def test_manifest_inconsistent_modalities_rejected():
    man = Manifest([
        ManifestRecord(id="s1", modality="vision", label="ID"),
        ManifestRecord(id="s1", modality="text", label="FullOOD"),
    ])
    with pytest.raises(DataError, match="inconsistent"):
        man.sample_table()


def test_manifest_unknown_label_rejected():
    with pytest.raises(DataError, match="unknown label"):
        ManifestRecord(id="s1", modality="vision", label="weird").validate()
