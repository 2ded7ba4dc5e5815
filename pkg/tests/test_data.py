import json

import numpy as np
import pytest

from voxseg.folds import FoldSplit, split_folds
from voxseg.params import ConfigurationError
from voxseg.phantom import (GenerationError, PhantomSpec, generate_cohort,
                            generate_phantom)
from voxseg.volume import (Volume, load_volume, read_manifest, save_volume,
                           write_manifest)


class TestVolume:
    def test_annotation_shape_enforced(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((4, 4, 4)), annotation=np.zeros((2, 2, 2)))

    def test_invalid_spacing(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))

    def test_tumor_volume_ml(self):
        ann = np.zeros((10, 10, 10), dtype=np.uint8)
        ann[:5, :5, :5] = 1  # 125 voxels
        vol = Volume(data=np.zeros((10, 10, 10)), spacing=(2.0, 1.0, 1.0),
                     annotation=ann)
        assert vol.tumor_volume_ml() == pytest.approx(125 * 2.0 / 1000.0)

    def test_no_annotation_is_zero_ml(self):
        assert Volume(data=np.zeros((4, 4, 4))).tumor_volume_ml() == 0.0


class TestVolumeIO:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = Volume(data=rng.random((6, 7, 8)).astype(np.float32),
                     spacing=(0.5, 1.0, 2.0), patient_id="P007",
                     annotation=(rng.random((6, 7, 8)) > 0.8).astype(np.uint8))
        save_volume(vol, tmp_path / "P007")
        loaded = load_volume(tmp_path / "P007")
        np.testing.assert_array_equal(loaded.data, vol.data)
        np.testing.assert_array_equal(loaded.annotation, vol.annotation)
        assert loaded.spacing == vol.spacing
        assert loaded.patient_id == "P007"

    def test_roundtrip_without_annotation(self, tmp_path):
        vol = Volume(data=np.ones((3, 3, 3)), patient_id="P1")
        loaded = load_volume(save_volume(vol, tmp_path / "P1"))
        assert loaded.annotation is None

    def test_raw_payload_is_little_endian(self, tmp_path):
        vol = Volume(data=np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        save_volume(vol, tmp_path / "v")
        raw = (tmp_path / "v" / "image.raw").read_bytes()
        np.testing.assert_array_equal(
            np.frombuffer(raw, dtype="<f4"), np.arange(8, dtype=np.float32))
        meta = json.loads((tmp_path / "v" / "meta.json").read_text())
        assert meta["byte_order"] == "little"
        assert meta["dims"] == [2, 2, 2]

    def test_manifest_roundtrip(self, tmp_path):
        entries = [{"patient_id": "P0", "path": "P0", "tumor_volume_ml": 1.5},
                   {"patient_id": "P1", "path": "P1", "tumor_volume_ml": 0.2}]
        write_manifest(entries, tmp_path / "manifest.json")
        assert read_manifest(tmp_path / "manifest.json") == entries


class TestPhantom:
    def test_sphere_volume_oracle(self):
        # 4.19 ml at 1 mm spacing: sphere of radius 10 mm -> ~4189 voxels
        spec = PhantomSpec(shape=(48, 48, 48), head_semiaxes=(22, 22, 22),
                           tumor_volume_range_ml=(4.18879, 4.18879), seed=3)
        vol = generate_phantom(spec)
        count = int(vol.annotation.sum())
        assert abs(count - 4189) / 4189 < 0.05

    def test_annotation_volume_matches_request_within_5pct(self):
        for seed in range(5):
            spec = PhantomSpec(tumor_volume_range_ml=(2.0, 2.0), seed=seed)
            vol = generate_phantom(spec)
            assert abs(vol.tumor_volume_ml() - 2.0) / 2.0 < 0.05

    def test_zero_tumors_empty_annotation(self):
        vol = generate_phantom(PhantomSpec(tumor_count=0, seed=1))
        assert vol.annotation.sum() == 0

    def test_fixed_seed_bit_identical(self):
        spec = PhantomSpec(seed=7)
        a = generate_phantom(spec)
        b = generate_phantom(spec)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.annotation, b.annotation)

    def test_different_seed_differs(self):
        a = generate_phantom(PhantomSpec(seed=1))
        b = generate_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(a.data, b.data)

    def test_tumor_is_bright_against_head(self):
        spec = PhantomSpec(noise_sigma=0.0, seed=4)
        vol = generate_phantom(spec)
        tumor = vol.annotation.astype(bool)
        assert vol.data[tumor].min() == pytest.approx(spec.tumor_intensity)
        head = (vol.data > 0) & ~tumor
        assert vol.data[head].mean() < spec.tumor_intensity

    def test_tumor_too_large_raises(self):
        spec = PhantomSpec(shape=(24, 24, 24), head_semiaxes=(10, 10, 10),
                           tumor_volume_range_ml=(50.0, 50.0), seed=0)
        with pytest.raises(GenerationError):
            generate_phantom(spec)

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(tumor_volume_range_ml=(0.0, 1.0))
        with pytest.raises(ConfigurationError):
            PhantomSpec(tumor_count=-1)

    def test_cohort_ids_and_determinism(self):
        base = PhantomSpec(tumor_volume_range_ml=(0.5, 4.0))
        cohort = generate_cohort(4, base, seed=11)
        assert [v.patient_id for v in cohort] == ["P000", "P001", "P002", "P003"]
        again = generate_cohort(4, base, seed=11)
        for a, b in zip(cohort, again):
            np.testing.assert_array_equal(a.data, b.data)


class TestFoldSplit:
    def test_round_robin_oracle_pairs(self):
        vols = {f"P{v}": float(v) for v in range(1, 11)}
        split = split_folds(vols, k=5, seed=0)
        folds = [sorted(vols[p] for p in members) for members in split.folds()]
        assert folds == [[1.0, 10.0], [2.0, 9.0], [3.0, 8.0],
                         [4.0, 7.0], [5.0, 6.0]]

    def test_k_one_single_fold(self):
        vols = {f"P{v}": float(v) for v in range(3)}
        split = split_folds(vols, k=1, seed=0)
        assert sorted(split.folds()[0]) == sorted(vols)

    def test_partition_and_test_rotation(self):
        rng = np.random.default_rng(5)
        vols = {f"P{i}": float(rng.uniform(0.1, 10)) for i in range(17)}
        split = split_folds(vols, k=5, seed=2)
        all_members = [p for fold in split.folds() for p in fold]
        assert sorted(all_members) == sorted(vols)
        seen_in_test = []
        for it in range(5):
            train, val, test = split.iteration(it)
            assert sorted(train + val + test) == sorted(vols)
            assert len(set(train) & set(val)) == 0
            assert len(set(train) & set(test)) == 0
            seen_in_test.extend(test)
        assert sorted(seen_in_test) == sorted(vols)

    def test_balance_on_cohort_of_50(self):
        rng = np.random.default_rng(9)
        vols = {f"P{i}": float(np.exp(rng.uniform(np.log(0.1), np.log(10))))
                for i in range(50)}
        split = split_folds(vols, k=5, seed=3)
        cohort_mean = np.mean(list(vols.values()))
        for members in split.folds():
            fold_mean = np.mean([vols[p] for p in members])
            assert abs(fold_mean - cohort_mean) / cohort_mean < 0.15

    def test_cohort_smaller_than_k(self):
        with pytest.raises(ConfigurationError):
            split_folds({"P0": 1.0, "P1": 2.0}, k=5)

    def test_tie_shuffling_is_seeded(self):
        vols = {f"P{i}": 1.0 for i in range(10)}
        a = split_folds(vols, k=5, seed=1)
        b = split_folds(vols, k=5, seed=1)
        c = split_folds(vols, k=5, seed=2)
        assert a.assignments == b.assignments
        assert a.assignments != c.assignments
