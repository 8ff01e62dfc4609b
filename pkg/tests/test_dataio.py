import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cutgen.dataio import (DEFECT_KINDS, TOY_CATEGORY, DatasetSpec, KShotSample,
                           _render_disk, load_image, load_mask, load_split,
                           make_toy_dataset, read_manifest, sample_kshot, save_image,
                           write_generated)
from cutgen.types import AnnotatedSample, ImageSample, ValidationError, derive_seed


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestToyDataset:
    def test_counts_and_mask_presence(self, toy_root, toy_test_samples):
        assert len(toy_test_samples) == 12  # 6 good + 6 defect
        nonzero = [s for s in toy_test_samples if s.mask.max() > 0]
        assert len(nonzero) == 6
        assert all(s.y_img == 1 for s in nonzero)

    def test_no_anomalies_means_all_masks_zero(self, tmp_path):
        spec = make_toy_dataset(tmp_path / "d", n_normal=2, n_anomalous=0, seed=1)
        samples = list(load_split(spec))
        assert all(s.mask.max() == 0 for s in samples)

    def test_mask_matches_pixel_difference_oracle(self, toy_root):
        # each defect differs from its paired clean render exactly on the mask
        for idx in range(6):
            rng = np.random.default_rng(derive_seed(0, "toy-test-defect", idx))
            clean, _ = _render_disk(rng)
            defect = load_image(toy_root / TOY_CATEGORY / "test" / "defect" / f"{idx:03d}.png")
            mask = load_mask(toy_root / TOY_CATEGORY / "ground_truth" / "defect" / f"{idx:03d}_mask.png") > 0.5
            clean_q = np.round(clean * 255.0) / 255.0
            diff = np.abs(defect - clean_q).max(axis=2)
            assert np.array_equal(diff > 1.0 / 255.0, mask)

    def test_same_seed_byte_identical(self, tmp_path):
        make_toy_dataset(tmp_path / "a", 3, 3, seed=7)
        make_toy_dataset(tmp_path / "b", 3, 3, seed=7)
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
        make_toy_dataset(tmp_path / "c", 3, 3, seed=8)
        assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")

    def test_all_defect_kinds_rendered(self, toy_root):
        kinds = {DEFECT_KINDS[i % 3] for i in range(6)}
        assert kinds == {"scratch", "blob", "wedge"}

    def test_bad_counts_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            make_toy_dataset(tmp_path / "x", 0, 1)


class TestMvtecLayout:
    def test_train_split_is_all_normal(self, toy_train_samples):
        assert len(toy_train_samples) == 6
        assert all(s.y_img == 0 and s.mask.max() == 0 for s in toy_train_samples)

    def test_missing_mask_raises_with_path(self, tmp_path):
        make_toy_dataset(tmp_path / "d", 2, 2, seed=0)
        victim = tmp_path / "d" / TOY_CATEGORY / "ground_truth" / "defect" / "001_mask.png"
        victim.unlink()
        spec = DatasetSpec(root=tmp_path / "d", layout="toy",
                           categories=(TOY_CATEGORY,), split="test")
        with pytest.raises(ValidationError, match="001_mask.png"):
            list(load_split(spec))

    def test_unknown_layout_rejected(self, toy_root):
        with pytest.raises(ValidationError):
            DatasetSpec(root=toy_root, layout="nope", categories=("x",))

    def test_missing_root_rejected(self):
        with pytest.raises(ValidationError):
            DatasetSpec(root=Path("/nonexistent/nowhere"), layout="mvtec", categories=("x",))


class TestVisaLayout:
    @pytest.fixture()
    def visa_root(self, tmp_path, rng):
        root = tmp_path / "visa"
        (root / "split_csv").mkdir(parents=True)
        (root / "images").mkdir()
        (root / "masks").mkdir()
        rows = ["object,split,label,image,mask"]
        for i in range(2):
            save_image(rng.random((64, 64, 3)), root / "images" / f"n{i}.png")
            rows.append(f"widget,test,normal,images/n{i}.png,")
        save_image(rng.random((64, 64, 3)), root / "images" / "a0.png")
        m = np.zeros((64, 64))
        m[10:20, 10:20] = 1.0
        save_image(np.stack([m] * 3, axis=-1), root / "masks" / "a0.png")
        rows.append("widget,test,anomaly,images/a0.png,masks/a0.png")
        (root / "split_csv" / "1cls.csv").write_text("\n".join(rows) + "\n")
        return root

    def test_loads_both_classes(self, visa_root):
        spec = DatasetSpec(root=visa_root, layout="visa", categories=("widget",), split="test")
        samples = list(load_split(spec))
        assert sorted(s.y_img for s in samples) == [0, 0, 1]
        anom = [s for s in samples if s.y_img == 1][0]
        assert anom.mask.max() == 1.0

    def test_missing_mask_entry_raises(self, visa_root):
        csv = visa_root / "split_csv" / "1cls.csv"
        csv.write_text(csv.read_text().replace(",masks/a0.png", ","))
        spec = DatasetSpec(root=visa_root, layout="visa", categories=("widget",), split="test")
        with pytest.raises(ValidationError, match="mask"):
            list(load_split(spec))


class TestKShot:
    def test_same_inputs_same_selection(self, toy_root):
        spec = DatasetSpec(root=toy_root, layout="toy", categories=(TOY_CATEGORY,), split="train")
        a = sample_kshot(spec, TOY_CATEGORY, 2, seed=5)
        b = sample_kshot(spec, TOY_CATEGORY, 2, seed=5)
        assert a == b
        assert len(set(a.paths)) == 2

    def test_all_returns_canonical_order(self, toy_root, toy_train_samples):
        spec = DatasetSpec(root=toy_root, layout="toy", categories=(TOY_CATEGORY,), split="train")
        got = sample_kshot(spec, TOY_CATEGORY, "all", seed=3)
        assert list(got.paths) == [s.image.path for s in toy_train_samples]

    def test_matches_shuffle_prefix_oracle(self, toy_root, toy_train_samples):
        spec = DatasetSpec(root=toy_root, layout="toy", categories=(TOY_CATEGORY,), split="train")
        paths = [s.image.path for s in toy_train_samples]
        for seed in range(5):
            got = sample_kshot(spec, TOY_CATEGORY, 2, seed)
            rng = np.random.default_rng(derive_seed(seed, "kshot", TOY_CATEGORY, 2))
            perm = rng.permutation(len(paths))
            assert list(got.paths) == [paths[i] for i in perm[:2]]

    def test_k_exceeding_pool_rejected(self, toy_root):
        spec = DatasetSpec(root=toy_root, layout="toy", categories=(TOY_CATEGORY,), split="train")
        with pytest.raises(ValidationError):
            sample_kshot(spec, TOY_CATEGORY, 99, seed=0)
        with pytest.raises(ValidationError):
            sample_kshot(spec, TOY_CATEGORY, 0, seed=0)


class TestGeneratedManifest:
    def _samples(self, rng):
        out = []
        for i, y in enumerate((1, 1, 0)):
            px = np.round(rng.random((64, 64, 3)) * 255) / 255
            y_pix = np.round(rng.random((64, 64)) * 255) / 255 if y else np.zeros((64, 64))
            out.append(AnnotatedSample(
                image=ImageSample(px, "cat"), y_img=y, y_pix=y_pix, prompt=None,
                seed=10 + i, gamma=0.25, metadata={"source_normal": f"n{i}.png"}))
        return out

    def test_write_read_round_trip(self, tmp_path, rng):
        samples = self._samples(rng)
        write_generated(samples, tmp_path, "cat")
        spec = DatasetSpec(root=tmp_path, layout="generated", categories=("cat",))
        loaded = list(load_split(spec))
        assert [s.y_img for s in loaded] == [s.y_img for s in samples]
        for got, orig in zip(loaded, samples):
            assert np.array_equal(got.mask, orig.y_pix)
            assert np.array_equal(got.image.pixels, orig.image.pixels)

    def test_manifest_records_schema(self, tmp_path, rng):
        cat_dir = write_generated(self._samples(rng), tmp_path, "cat")
        recs = read_manifest(cat_dir)
        assert [r["index"] for r in recs] == [0, 1, 2]
        for r in recs:
            assert set(r) == {"index", "y_img", "seed", "gamma", "prompt",
                              "source_normal", "anomaly_tokens"}

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(ValidationError):
            read_manifest(tmp_path)
