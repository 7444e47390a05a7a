import numpy as np
import pytest

from bcpt.cluster import BACKGROUND
from bcpt.errors import InvalidArgumentError, StructuralError
from bcpt.synth import (
    SceneConfig,
    class_signatures,
    fold_digest,
    generate_scene,
    load_fold,
    make_fold,
    save_fold,
)


def scene(cfg, seed=0, **kw):
    return generate_scene(cfg, np.random.default_rng(seed), **kw)


class TestGenerateScene:
    def test_noise_free_features_are_signatures(self):
        cfg = SceneConfig(noise_sigma=0.0, height=16, width=16)
        s = scene(cfg, 3)
        sigs = class_signatures(cfg)
        feats = s.features.reshape(cfg.feature_dim, -1).T
        labels = s.true_labels.reshape(-1)
        for f, lab in zip(feats, labels):
            if lab != BACKGROUND:
                np.testing.assert_array_equal(f, sigs[lab])
            else:
                assert any(np.array_equal(f, sigs[cfg.n_classes + m]) for m in range(cfg.n_bg_modes))

    def test_background_is_diverse(self):
        cfg = SceneConfig(noise_sigma=0.0)
        feats = np.concatenate([scene(cfg, i).features.reshape(cfg.feature_dim, -1) for i in range(5)], axis=1)
        bg = np.concatenate([scene(cfg, i).true_labels.reshape(-1) == BACKGROUND for i in range(5)])
        assert len(np.unique(feats[:, bg].T, axis=0)) == cfg.n_bg_modes

    def test_no_novel_classes(self):
        s = scene(SceneConfig(n_novel=0), 1)
        np.testing.assert_array_equal(s.train_labels, s.true_labels)

    def test_seeded(self):
        cfg = SceneConfig()
        a, b = scene(cfg, 5), scene(cfg, 5)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.true_labels, b.true_labels)

    def test_forced_class_is_visible(self):
        cfg = SceneConfig(blob_count_range=(5, 5))
        for seed in range(20):
            assert (scene(cfg, seed, force_class=4).true_labels == 4).any()

    @pytest.mark.parametrize("seed", range(10))
    def test_relabelling_is_lossless(self, seed):
        s = scene(SceneConfig(), seed)
        novel = s.true_labels >= s.n_base
        assert np.all(s.train_labels[novel] == BACKGROUND)
        np.testing.assert_array_equal(s.train_labels[~novel], s.true_labels[~novel])
        rebuilt = np.where(s.hidden_novel != -1, s.hidden_novel, s.train_labels)
        np.testing.assert_array_equal(rebuilt, s.true_labels)


class TestSignatures:
    @pytest.mark.parametrize("seed", range(10))
    def test_pairwise_cosine_below_threshold(self, seed):
        cfg = SceneConfig(seed=seed)
        sigs = class_signatures(cfg)
        unit = sigs / np.linalg.norm(sigs, axis=1, keepdims=True)
        cos = unit @ unit.T
        off = cos[~np.eye(len(sigs), dtype=bool)]
        assert off.max() < cfg.cosine_threshold

    def test_foreground_and_background_half_spaces(self):
        cfg = SceneConfig()
        sigs = class_signatures(cfg)
        assert np.all(sigs[: cfg.n_classes, 0] > 0)
        assert np.all(sigs[cfg.n_classes :, 0] < 0)
        assert np.linalg.norm(sigs[cfg.n_classes :], axis=1).max() < np.linalg.norm(sigs[: cfg.n_classes], axis=1).min()

    def test_capacity_exceeded(self):
        with pytest.raises(InvalidArgumentError):
            make_fold(SceneConfig(feature_dim=6, n_base=3, n_novel=2), 1, 1)


class TestSceneConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"height": 200, "width": 200}, {"noise_sigma": -0.1}, {"n_base": 0}, {"blob_count_range": (3, 2)}],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            SceneConfig(**kw)


class TestFold:
    def test_split(self):
        fold = make_fold(SceneConfig(n_base=3, n_novel=2), 4, 4, seed=1)
        assert fold.base_class_ids == [0, 1, 2] and fold.novel_class_ids == [3, 4]
        assert not set(fold.base_class_ids) & set(fold.novel_class_ids)
        for s in fold.train_scenes:
            assert set(np.unique(s.train_labels)) <= {BACKGROUND, 0, 1, 2}
        for s in fold.eval_scenes:
            assert set(s.classes_present()) & {3, 4}

    def test_same_seed_same_fold(self):
        cfg = SceneConfig()
        assert fold_digest(make_fold(cfg, 3, 2, seed=4)) == fold_digest(make_fold(cfg, 3, 2, seed=4))
        assert fold_digest(make_fold(cfg, 3, 2, seed=4)) != fold_digest(make_fold(cfg, 3, 2, seed=5))

    def test_needs_scenes(self):
        with pytest.raises(InvalidArgumentError):
            make_fold(SceneConfig(), 0, 1)

    def test_file_round_trip(self, tmp_path):
        fold = make_fold(SceneConfig(height=12, width=10), 2, 2, seed=3)
        save_fold(fold, tmp_path / "f.bin")
        back = load_fold(tmp_path / "f.bin")
        assert back.config == fold.config
        assert back.base_class_ids == fold.base_class_ids and back.novel_class_ids == fold.novel_class_ids
        assert fold_digest(back) == fold_digest(fold)
        for a, b in zip(fold.train_scenes, back.train_scenes):
            np.testing.assert_array_equal(a.train_labels, b.train_labels)
        np.testing.assert_array_equal(back.signatures, fold.signatures)

    def test_file_bytes_deterministic(self, tmp_path):
        cfg = SceneConfig(height=8, width=8)
        save_fold(make_fold(cfg, 2, 1, seed=0), tmp_path / "a.bin")
        save_fold(make_fold(cfg, 2, 1, seed=0), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_wrong_container(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTAFOLD" + bytes(16))
        with pytest.raises(StructuralError):
            load_fold(tmp_path / "x.bin")
