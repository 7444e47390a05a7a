import math
from dataclasses import replace

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from bcpt.cluster import BACKGROUND, ClusterBank, aggregate, assign, ema_update, similarity
from bcpt.config import STREAM_BATCHES, TrainConfig, derive_seed
from bcpt.embedder import EmbedderParams, forward, init_params
from bcpt.errors import InvalidArgumentError, StructuralError, TrainingDivergedError
from bcpt.losses import ProjectionBank
from bcpt.synth import SceneConfig, make_fold
from bcpt.trainer import (
    checkpoint_digest,
    embed,
    init_state,
    learning_rate,
    load_checkpoint,
    loss_and_grads,
    pretrain,
    save_checkpoint,
    supervision_labels,
    train_step,
    with_config,
)

from oracles import central_difference


@pytest.fixture(scope="module")
def tiny_fold():
    return make_fold(SceneConfig(height=12, width=12, feature_dim=10, n_base=2, n_novel=1), 4, 2, seed=0)


def small_config(**kw):
    base = dict(k=3, epochs=2, batch_pixels=64, hidden_dim=6, embed_dim=4, scenes_per_batch=2)
    return TrainConfig(**{**base, **kw})


def trajectory(state):
    return [a.copy() for a in state.params.arrays()] + [state.projections.weights.copy()] + [
        v.copy() for v in state.velocity
    ]


class TestEmbed:
    def test_identity_layer(self, tiny_fold):
        s = tiny_fold.train_scenes[0]
        params = EmbedderParams([np.eye(10)], [np.zeros(10)])
        batch = embed(params, s)
        np.testing.assert_array_equal(batch.data, s.features.reshape(10, -1))
        np.testing.assert_array_equal(batch.labels, s.train_labels.reshape(-1))

    def test_zero_parameters(self, tiny_fold):
        params = EmbedderParams([np.zeros((5, 10)), np.zeros((3, 5))], [np.zeros(5), np.zeros(3)])
        assert not embed(params, tiny_fold.train_scenes[0]).data.any()

    def test_one_pixel_oracle(self):
        params = init_params([4, 3, 2], seed=1)
        params.biases[0][:] = [0.1, -0.2, 0.3]
        x = np.array([0.5, -1.0, 2.0, 0.25])
        hidden = [max(0.0, sum(params.weights[0][r, c] * x[c] for c in range(4)) + params.biases[0][r]) for r in range(3)]
        expected = [sum(params.weights[1][r, c] * hidden[c] for c in range(3)) + params.biases[1][r] for r in range(2)]
        out, _ = forward(params, x[:, None])
        np.testing.assert_allclose(out[:, 0], expected, rtol=1e-14, atol=1e-15)

    def test_shape_mismatch(self, tiny_fold):
        with pytest.raises(StructuralError):
            embed(init_params([3, 2]), tiny_fold.train_scenes[0])

    def test_bad_layer_chain(self):
        with pytest.raises(StructuralError):
            EmbedderParams([np.ones((3, 2)), np.ones((2, 4))], [np.zeros(3), np.zeros(2)])


def chain_instance(seed, scheme):
    rng = np.random.default_rng(seed)
    params = init_params([6, 5, 4], seed=seed)
    params.biases[0][:] = 0.1 * rng.standard_normal(5)
    x = rng.standard_normal((6, 12))
    labels = rng.integers(-1, 2, size=12)
    labels[:2] = (BACKGROUND, 0)
    if scheme == "standard":
        labels = supervision_labels(labels, 2, uses_clusters=False)
        return params, ProjectionBank(rng.standard_normal((4, 3))), None, x, labels, None
    clusters = ClusterBank(rng.standard_normal((4, 3)))
    emb, _ = forward(params, x)
    a = assign(similarity(clusters, emb[:, labels == BACKGROUND]))
    return params, ProjectionBank(rng.standard_normal((4, 2))), clusters, x, labels, a


class TestGradientChain:
    @pytest.mark.parametrize("scheme", ["standard", "bcpt"])
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences(self, scheme, seed):
        params, proj, clusters, x, labels, a = chain_instance(seed, scheme)
        _, grads, gw, _, _ = loss_and_grads(params, proj, clusters, x, labels, a, 0.1)
        arrays = params.arrays()
        for idx, g in enumerate(grads):

            def f(v, idx=idx):
                trial = [p.copy() for p in arrays]
                trial[idx] = v
                return loss_and_grads(EmbedderParams.from_arrays(trial), proj, clusters, x, labels, a, 0.1)[0]

            fd = central_difference(f, arrays[idx])
            scale = max(np.max(np.abs(fd)), 1e-8)
            assert np.max(np.abs(g - fd)) / scale < 1e-4
        fd_w = central_difference(
            lambda w: loss_and_grads(params, ProjectionBank(w), clusters, x, labels, a, 0.1)[0], proj.weights
        )
        assert np.max(np.abs(gw - fd_w)) / np.max(np.abs(fd_w)) < 1e-4


class TestTrainStep:
    def test_zero_learning_rate(self, tiny_fold):
        cfg = small_config(lr=0.0, ocg_enabled=False)
        state = init_state(cfg, 10, 2)
        after = train_step(state, tiny_fold.train_scenes[:2])
        for a, b in zip(state.params.arrays(), after.params.arrays()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(state.projections.weights, after.projections.weights)
        assert not np.array_equal(state.clusters.centers, after.clusters.centers)

    def test_cluster_update_uses_pre_step_embeddings(self, tiny_fold):
        cfg = small_config(ocg_enabled=False)
        state = init_state(cfg, 10, 2)
        after = train_step(state, tiny_fold.train_scenes[:2])
        # replay the batch draw to rebuild the assignment
        rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_BATCHES))
        scenes = tiny_fold.train_scenes[:2]
        x = np.concatenate([s.features.reshape(10, -1) for s in scenes], axis=1)
        lab = np.concatenate([s.train_labels.reshape(-1) for s in scenes])
        idx = np.sort(rng.choice(x.shape[1], size=64, replace=False))
        emb, _ = forward(state.params, x[:, idx])
        bg = emb[:, lab[idx] == BACKGROUND]
        expected = ema_update(state.clusters, aggregate(bg, assign(similarity(state.clusters, bg))))
        np.testing.assert_array_equal(after.clusters.centers, expected.centers)

    def test_alpha_leaves_cluster_update_unchanged(self, tiny_fold):
        state = init_state(small_config(ocg_enabled=False), 10, 2)
        a = train_step(state, tiny_fold.train_scenes[:2])
        b = train_step(with_config(state, alpha=0.7), tiny_fold.train_scenes[:2])
        np.testing.assert_array_equal(a.clusters.centers, b.clusters.centers)
        assert not np.array_equal(a.params.weights[0], b.params.weights[0])

    def test_input_is_not_mutated(self, tiny_fold):
        state = init_state(small_config(), 10, 2)
        before = checkpoint_digest(state)
        train_step(state, tiny_fold.train_scenes[:2])
        assert checkpoint_digest(state) == before

    def test_divergence_reports_iteration(self, tiny_fold):
        state = init_state(small_config(lr=1e6), 10, 2)
        with pytest.raises(TrainingDivergedError) as info:
            with np.errstate(all="ignore"):
                for _ in range(50):
                    state = train_step(state, tiny_fold.train_scenes[:2])
        assert info.value.iteration == state.iteration

    def test_offline_needs_pseudo_labels(self, tiny_fold):
        state = init_state(small_config(scheme="offline"), 10, 2)
        with pytest.raises(StructuralError):
            train_step(state, tiny_fold.train_scenes[:2])


class TestAblationEquivalence:
    def test_bcpt_without_components_is_standard(self, tiny_fold):
        std = init_state(small_config(scheme="standard"), 10, 2)
        abl = init_state(small_config(scheme="bcpt", bmc_enabled=False, ocg_enabled=False), 10, 2)
        for step in range(20):
            scenes = [tiny_fold.train_scenes[step % 4], tiny_fold.train_scenes[(step + 1) % 4]]
            std, abl = train_step(std, scenes), train_step(abl, scenes)
            for a, b in zip(trajectory(std), trajectory(abl)):
                assert a.tobytes() == b.tobytes()

    def test_projection_columns(self):
        assert init_state(small_config(scheme="standard"), 10, 2).projections.n_classes == 3
        assert init_state(small_config(scheme="bcpt"), 10, 2).projections.n_classes == 2
        assert init_state(small_config(scheme="bcpt", bmc_enabled=False), 10, 2).projections.n_classes == 3


class TestPretrain:
    def test_zero_epochs_is_initialisation(self, tiny_fold):
        cfg = small_config(epochs=0)
        state = pretrain(tiny_fold, cfg)
        assert state.iteration == 0
        assert checkpoint_digest(state) == checkpoint_digest(init_state(cfg, 10, 2))

    def test_epoch_replay(self, tiny_fold):
        cfg = small_config(epochs=1, scenes_per_batch=1)
        state = init_state(cfg, 10, 2, total_steps=4)
        order = state.rng.permutation(4)
        for i in order:
            state = train_step(state, [tiny_fold.train_scenes[i]])
        assert checkpoint_digest(pretrain(tiny_fold, cfg)) == checkpoint_digest(state)

    @pytest.mark.parametrize("scheme", ["standard", "bcpt", "offline"])
    def test_deterministic_digest(self, tiny_fold, scheme):
        cfg = small_config(scheme=scheme)
        assert checkpoint_digest(pretrain(tiny_fold, cfg)) == checkpoint_digest(pretrain(tiny_fold, cfg))
        assert checkpoint_digest(pretrain(tiny_fold, cfg)) != checkpoint_digest(pretrain(tiny_fold, replace(cfg, seed=1)))

    def test_epoch_log(self, tiny_fold):
        records = []
        state = pretrain(tiny_fold, small_config(epochs=3), on_epoch=records.append)
        assert [r["epoch"] for r in records] == [0, 1, 2]
        assert state.log == records
        for r in records:
            assert r["loss"] == pytest.approx(r["base_loss"] + 0.1 * r["bm_loss"], rel=1e-12)

    def test_offline_pseudo_labels_cover_background(self, tiny_fold):
        state = pretrain(tiny_fold, small_config(scheme="offline", epochs=1))
        for s, labels in zip(tiny_fold.train_scenes, state.offline_labels):
            bg = s.train_labels.reshape(-1) == BACKGROUND
            assert np.all(labels[bg] >= 0) and np.all(labels[bg] < 3)
            assert np.all(labels[~bg] == -1)

    def test_noise_free_standard_converges(self):
        fold = make_fold(SceneConfig(n_base=2, n_novel=0, noise_sigma=0.0, height=16, width=16), 4, 1, seed=0)
        state = pretrain(fold, TrainConfig(scheme="standard", epochs=100))
        assert state.iteration == 200
        x = np.concatenate([s.features.reshape(16, -1) for s in fold.train_scenes], axis=1)
        y = np.concatenate([s.train_labels.reshape(-1) for s in fold.train_scenes])
        assert LogisticRegression(C=1e4, max_iter=5000).fit(x.T, y).score(x.T, y) == 1.0
        assert state.log[-1]["loss"] < 1e-3
        assert state.log[-1]["loss"] < 1e-3 * state.log[0]["loss"]
        emb, _ = forward(state.params, x)
        pred = np.argmax(state.projections.weights.T @ emb, axis=0)
        np.testing.assert_array_equal(pred, supervision_labels(y, 2, uses_clusters=False))

    def test_empty_fold(self, tiny_fold):
        with pytest.raises(InvalidArgumentError):
            pretrain(replace(tiny_fold, train_scenes=[]), small_config())


class TestCheckpoint:
    @pytest.mark.parametrize("scheme", ["standard", "bcpt", "offline"])
    def test_round_trip_then_step(self, tiny_fold, tmp_path, scheme):
        state = pretrain(tiny_fold, small_config(scheme=scheme, epochs=1))
        save_checkpoint(state, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert checkpoint_digest(back) == checkpoint_digest(state)
        assert back.config == state.config and back.log == state.log
        resumed = pretrain(tiny_fold, replace(state.config, epochs=2), state=back)
        direct = pretrain(tiny_fold, replace(state.config, epochs=2), state=state)
        assert checkpoint_digest(resumed) == checkpoint_digest(direct)

    def test_bytes_deterministic(self, tiny_fold, tmp_path):
        cfg = small_config()
        save_checkpoint(pretrain(tiny_fold, cfg), tmp_path / "a.bin")
        save_checkpoint(pretrain(tiny_fold, cfg), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.k, cfg.mu, cfg.alpha, cfg.momentum) == (6, 0.999, 0.1, 0.9)

    @pytest.mark.parametrize(
        "kw", [{"k": 1}, {"mu": 1.0}, {"alpha": -0.1}, {"scheme": "imagenet"}, {"mapping": "soft"}, {"lr": -1.0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(k=3, mapping="injective")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(InvalidArgumentError):
            TrainConfig.from_dict({"kk": 3})

    def test_cosine_schedule(self):
        cfg = TrainConfig(lr=0.2, lr_schedule="cosine")
        assert learning_rate(cfg, 0, 10) == pytest.approx(0.2)
        assert learning_rate(cfg, 5, 10) == pytest.approx(0.1)
        assert learning_rate(cfg, 10, 10) == pytest.approx(0.0, abs=1e-15)
        assert learning_rate(TrainConfig(lr=0.2), 7, 10) == 0.2

    def test_seed_streams_differ(self):
        assert len({derive_seed(0, 1), derive_seed(0, 2), derive_seed(1, 1), derive_seed(0, 1, 0)}) == 4
        assert derive_seed(5, 3, 2) == derive_seed(5, 3, 2)
        assert math.isfinite(derive_seed(0))
