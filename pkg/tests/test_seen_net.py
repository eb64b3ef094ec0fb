import math

import numpy as np
import pytest

from frustumdeco.errors import DivergedLoss, MissingMask, ShapeMismatch
from frustumdeco.frustum import FrustumBatch, build_batch
from frustumdeco.gradcheck import make_check_batch
from frustumdeco.hidden import RecodedCloud, recode_frame
from frustumdeco.seen_net import (
    SeenConfig,
    SeenModel,
    TrainConfig,
    decorate,
    decorate_cloud,
    fusion_forward,
    train,
)
from frustumdeco.synth import gen_scene, separable_spec
from frustumdeco import autodiff as ad


def relu(x):
    return np.maximum(x, 0.0)


def reference_forward(P, feats, one_hot, cfg):
    """Straight-line numpy forward pass for variant D, written out layer by layer."""
    B, m, d = feats.shape
    x = feats.astype(np.float64).copy()
    x[:, :, :3] *= cfg.coord_scale
    h = relu(x @ P["seg.enc0.w"] + P["seg.enc0.b"])
    local = relu(h @ P["seg.enc1.w"] + P["seg.enc1.b"])
    g = relu(local @ P["seg.glob.w"] + P["seg.glob.b"]).max(axis=1)
    g = np.concatenate([g, one_hot], axis=1)
    z = np.concatenate([local, np.broadcast_to(g[:, None, :], (B, m, g.shape[1]))], axis=2)
    z = relu(z @ P["seg.dec0.w"] + P["seg.dec0.b"])
    seg_feat = relu(z @ P["seg.dec1.w"] + P["seg.dec1.b"])
    logits = seg_feat @ P["seg.head.w"] + P["seg.head.b"]
    a = relu(relu(seg_feat @ P["fuse.seg.0.w"] + P["fuse.seg.0.b"]) @ P["fuse.seg.1.w"] + P["fuse.seg.1.b"])
    point_feat = x[:, :, 3:]
    b = relu(relu(point_feat @ P["fuse.point.0.w"] + P["fuse.point.0.b"]) @ P["fuse.point.1.w"] + P["fuse.point.1.b"])
    u = relu(np.concatenate([a, b], axis=2) @ P["fuse.out.0.w"] + P["fuse.out.0.b"])
    deco = u @ P["fuse.out.1.w"] + P["fuse.out.1.b"]
    return logits.reshape(B * m, -1), deco.reshape(B * m, -1)


@pytest.fixture(scope="module")
def scene_cloud():
    frame = gen_scene(separable_spec(4)).frame
    return recode_frame(frame)


class TestForward:
    def test_variant_d_matches_reference(self):
        rng = np.random.default_rng(0)
        model = SeenModel.init(SeenConfig(variant="D"), seed=1)
        batch = make_check_batch(rng, B=3, m=20)
        out = model.forward(batch)
        logits, deco = reference_forward(model.params, batch.features, batch.one_hot, model.config)
        assert np.max(np.abs(out.logits.value - logits)) <= 1e-9
        assert np.max(np.abs(out.decoration.value - deco)) <= 1e-9

    @pytest.mark.parametrize("m", [1, 7, 64])
    def test_semantic_width(self, m):
        batch = make_check_batch(np.random.default_rng(m), B=2, m=m)
        for v in "ABCD":
            model = SeenModel.init(SeenConfig(variant=v), seed=0)
            out = model.forward(batch)
            assert out.decoration.shape == (2 * m, 1 if v == "A" else 16)
            assert decorate(batch, model).points.shape == (2 * m, 20)

    @pytest.mark.parametrize("variant", ["B", "C", "D"])
    def test_label_columns_never_reach_features(self, variant):
        rng = np.random.default_rng(11)
        model = SeenModel.init(SeenConfig(variant=variant), seed=2)
        batch = make_check_batch(rng, B=2, m=16)
        base = model.forward(batch)
        pts = batch.points.copy()
        pts[:, :, -3:] = rng.integers(0, 50, size=pts[:, :, -3:].shape)
        out = model.forward(FrustumBatch(pts, batch.one_hot, batch.indices, batch.origin_counts))
        for a, b in zip(base, out):
            np.testing.assert_array_equal(a.value, b.value)

    def test_head_width_must_be_semantic(self):
        with pytest.raises(ValueError):
            SeenConfig(variant="C", seg_mlp=(32, 8))

    def test_variant_a_gt_passes_labels(self):
        model = SeenModel.init(SeenConfig(variant="A", mask_source="gt"), seed=0)
        batch = make_check_batch(np.random.default_rng(2), B=2, m=16)
        deco = model.forward(batch).decoration.value
        labels = batch.seg_label.reshape(-1)
        assert deco.shape == (32, 1) and (deco[:, 0] == labels).all()
        rows = decorate(batch, model).points
        assert (rows[:, 4:] == labels[:, None]).all()

    def test_variant_a_needs_mask(self):
        cfg = SeenConfig(variant="A")
        with pytest.raises(MissingMask):
            fusion_forward("A", ad.Var(np.zeros((3, 64))), ad.Var(np.zeros((3, 1))), None, {}, cfg)

    def test_zero_weights_uniform_loss(self):
        model = SeenModel.init(SeenConfig(), seed=0)
        model = SeenModel(model.config, {k: np.zeros_like(v) for k, v in model.params.items()})
        batch = make_check_batch(np.random.default_rng(0), B=2, m=8)
        out = model.forward(batch)
        assert (out.logits.value == 0).all()
        total, _ = model.loss(batch)
        assert total.value[0, 0] == pytest.approx(2 * math.log(2))

    def test_permutation(self):
        rng = np.random.default_rng(5)
        model = SeenModel.init(SeenConfig(), seed=5)
        batch = make_check_batch(rng, B=2, m=16)
        base = model.forward(batch)
        for _ in range(20):
            perm = np.stack([rng.permutation(16) for _ in range(2)])
            pts = np.take_along_axis(batch.points, perm[:, :, None], axis=1)
            out = model.forward(FrustumBatch(pts, batch.one_hot, batch.indices, batch.origin_counts))
            rows = (perm + np.arange(2)[:, None] * 16).ravel()
            np.testing.assert_array_equal(out.logits.value, base.logits.value[rows])
            np.testing.assert_array_equal(out.seg_feat.value, base.seg_feat.value[rows])
            np.testing.assert_array_equal(out.decoration.value, base.decoration.value[rows])
            np.testing.assert_array_equal(out.global_feat.value, base.global_feat.value)

    def test_wrong_channel_count(self):
        model = SeenModel.init(SeenConfig(d_in=4), seed=0)
        batch = make_check_batch(np.random.default_rng(0), B=1, m=4, d_in=5)
        with pytest.raises(ShapeMismatch):
            model.forward(batch)


class TestTraining:
    def test_zero_step_is_frozen(self, scene_cloud):
        batch = build_batch(scene_cloud, 32, 3, np.random.default_rng(0))
        init = SeenModel.init(SeenConfig(), seed=0)
        res = train(batch, init.config, TrainConfig(epochs=3, lr=0.0), model=init)
        for k in init.params:
            np.testing.assert_array_equal(res.model.params[k], init.params[k])
        losses = [h.loss for h in res.history]
        assert max(losses) - min(losses) < 1e-12

    def test_equal_seeds_bit_identical(self, scene_cloud):
        batch = build_batch(scene_cloud, 32, 3, np.random.default_rng(0))
        runs = [train(batch, SeenConfig(), TrainConfig(seed=9, epochs=2, lr=0.02)) for _ in range(2)]
        assert runs[0].history == runs[1].history
        for k in runs[0].model.params:
            assert runs[0].model.params[k].tobytes() == runs[1].model.params[k].tobytes()

    def test_zero_epochs(self, scene_cloud):
        batch = build_batch(scene_cloud, 16, 3, np.random.default_rng(0))
        res = train(batch, SeenConfig(), TrainConfig(seed=4, epochs=0))
        ref = SeenModel.init(SeenConfig(), seed=4)
        assert res.history == []
        for k in ref.params:
            np.testing.assert_array_equal(res.model.params[k], ref.params[k])

    def test_divergence_reported(self, scene_cloud):
        batch = build_batch(scene_cloud, 16, 3, np.random.default_rng(0))
        with pytest.raises(DivergedLoss) as info:
            with np.errstate(all="ignore"):
                train(batch, SeenConfig(), TrainConfig(epochs=20, lr=1e6, batch_size=2))
        assert info.value.last_finite_epoch is not None


class TestDecoration:
    def test_width_and_base(self, scene_cloud):
        model = SeenModel.init(SeenConfig(), seed=0)
        deco = decorate_cloud(scene_cloud, model)
        assert deco.points.shape == (len(scene_cloud.points), 20)
        np.testing.assert_array_equal(deco.points[:, :4], scene_cloud.points[:, :4])

    def test_frustum_order_preserved(self, scene_cloud):
        model = SeenModel.init(SeenConfig(), seed=0)
        deco = decorate_cloud(scene_cloud, model).points
        for i in np.unique(scene_cloud.index_label):
            rows = scene_cloud.points[scene_cloud.index_label == i]
            one = decorate_cloud(RecodedCloud(rows), model).points
            np.testing.assert_array_equal(deco[scene_cloud.index_label == i], one)

    def test_persistence_does_not_perturb(self, scene_cloud, tmp_path):
        model = SeenModel.init(SeenConfig(), seed=3)
        # checkpoints store float32; start from float32-representable weights
        model = SeenModel(model.config, {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()})
        model.save(tmp_path / "m.ckpt")
        back = SeenModel.load(tmp_path / "m.ckpt")
        assert back.config == model.config
        batch = build_batch(scene_cloud, 32, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(decorate(batch, back).points, decorate(batch, model).points)

    @pytest.mark.parametrize("variant", ["A", "B", "C"])
    def test_checkpoint_variants(self, variant, tmp_path):
        model = SeenModel.init(SeenConfig(variant=variant, mask_source="gt"), seed=1)
        model.save(tmp_path / "m.ckpt")
        assert SeenModel.load(tmp_path / "m.ckpt").config == model.config
