"""Network, loss and training tests (tiny configurations only)."""

import numpy as np
import pytest
import torch

from pmpose import skeleton
from pmpose.data import ConfigurationError, LabeledFrame, MatGeometry, PressureImage
from pmpose.nets import (
    ConvNetConfig,
    PoseConvNet,
    TrainingDiverged,
    _fk_batch,
    _keep_mask,
    load_checkpoint,
    loss_direct,
    loss_kinematic,
    make_dropout_rng,
    network_forward,
    parameter_count,
    predict,
    pretrain_then_specialize,
    save_checkpoint,
    train,
)
from pmpose.simulator import generate_dataset

GEOM = MatGeometry()


@pytest.fixture(scope="module")
def tiny_frames(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.pmpd"
    frames, _ = generate_dataset(2, 12, seed=5, path=path)
    return frames


def tiny_config(**kw):
    base = dict(
        variant="direct",
        epochs=2,
        learning_rate=1e-3,
        batch_size=8,
        frames_per_epoch=8,
        seed=1,
    )
    base.update(kw)
    return ConvNetConfig(**base)


class TestLosses:
    def test_direct_zero_at_truth(self):
        t = np.random.default_rng(0).normal(size=(10, 3))
        assert loss_direct(t, t) == 0.0

    def test_direct_345_case(self):
        t = np.zeros((10, 3))
        p = t.copy()
        p[4] = [0.03, 0.0, 0.04]
        assert abs(loss_direct(p, t) - 0.05) < 1e-12

    def test_direct_positive_homogeneity(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=(10, 3))
        p = t + rng.normal(size=(10, 3))
        one = loss_direct(p, t)
        two = loss_direct(t + 2 * (p - t), t)
        assert abs(two - 2 * one) < 1e-9

    def test_direct_triangle_bound_per_joint(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=(10, 3))
        q = rng.normal(size=(10, 3))
        t = rng.normal(size=(10, 3))
        assert loss_direct(p, t) <= loss_direct(p, q) + loss_direct(q, t) + 1e-12

    def test_kinematic_zero_at_truth(self):
        rng = np.random.default_rng(3)
        t = rng.normal(size=(10, 3))
        l = np.abs(rng.normal(size=17)) + 0.1
        assert loss_kinematic(t, l, t, l, 0.5, 0.5) == 0.0

    def test_kinematic_weighting_case(self):
        # root off by 1 m, one other joint off by 1 m, one length off by
        # 1 m, alpha = beta = 0.5 -> 1 + 0.5 + 0.5 = 2.0
        t = np.zeros((10, 3))
        p = t.copy()
        p[1] = [1.0, 0.0, 0.0]  # chest (the root) sits at labeled index 1
        p[4] = [0.0, 1.0, 0.0]
        lt = np.full(17, 0.3)
        lp = lt.copy()
        lp[6] += 1.0
        assert abs(loss_kinematic(p, lp, t, lt, 0.5, 0.5) - 2.0) < 1e-12

    def test_kinematic_beta_zero_ignores_lengths(self):
        rng = np.random.default_rng(4)
        t = rng.normal(size=(10, 3))
        p = t + 0.1
        lt = np.full(17, 0.3)
        a = loss_kinematic(p, lt, t, lt, 0.5, 0.0)
        b = loss_kinematic(p, lt + 5.0, t, lt, 0.5, 0.0)
        assert a == b

    def test_kinematic_alpha_one_matches_direct(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(10, 3))
        p = t + rng.normal(size=(10, 3)) * 0.2
        l = np.full(17, 0.3)
        assert abs(loss_kinematic(p, l, t, l, 1.0, 0.0) - loss_direct(p, t)) < 1e-9


class TestArchitecture:
    def test_output_dims_per_variant(self):
        for variant, dim in (
            ("direct", 30),
            ("kinematic_const_l", 23),
            ("kinematic_regress_l", 40),
        ):
            assert ConvNetConfig(
                variant=variant, beta=0.0 if variant == "kinematic_const_l" else 0.5
            ).out_dim == dim

    def test_parameter_count_closed_form(self):
        def conv_params(cin, cout):
            return (cin * 9 + 1) * cout

        convs = (
            conv_params(3, 64)
            + conv_params(64, 64)
            + conv_params(64, 128)
            + conv_params(128, 128)
        )
        # 128x54 -> pool -> 64x27 -> conv -> 62x25 -> pool -> 31x12
        # -> conv -> 29x10 -> conv -> 27x8
        flat = 128 * 27 * 8
        for out_dim in (30, 23, 40):
            assert parameter_count(out_dim) == convs + (flat + 1) * out_dim

    def test_forward_shapes(self):
        net = PoseConvNet(30)
        x = torch.zeros(2, 3, 128, 54)
        assert net(x).shape == (2, 30)

    def test_dropout_mask_rate(self):
        rng = make_dropout_rng(0)
        mask = _keep_mask(500_000, 0.25, rng)
        assert abs(mask.mean() - 0.75) < 0.005
        assert _keep_mask(100, 0.0, rng).all()

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            ConvNetConfig(variant="mystery")
        with pytest.raises(ConfigurationError):
            ConvNetConfig(dropout_p=1.0)
        with pytest.raises(ConfigurationError):
            ConvNetConfig(variant="kinematic_const_l", beta=0.5)


class TestNetworkForward:
    def test_direct_raw_is_30_and_deterministic(self, tiny_frames):
        net, _ = train(tiny_config(epochs=1), tiny_frames, GEOM)
        stack = net.stack_for(tiny_frames[0].image)
        a = network_forward(net, stack)
        b = network_forward(net, stack)
        assert a.raw.shape == (30,)
        np.testing.assert_array_equal(a.raw, b.raw)
        assert a.all_joints is None

    def test_kinematic_outputs_full_pose(self, tiny_frames):
        cfg = tiny_config(variant="kinematic_regress_l", epochs=1)
        net, _ = train(cfg, tiny_frames, GEOM)
        out = network_forward(net, net.stack_for(tiny_frames[0].image))
        assert out.raw.shape == (40,)
        assert out.all_joints.shape == (17, 3)
        assert np.all(out.lengths > 0)
        # link lengths hold in the decoded pose
        pose = skeleton.forward_kinematics(out.root, out.angles, out.lengths)
        np.testing.assert_allclose(pose.all_joints, out.all_joints, atol=1e-5)

    def test_dropout_changes_output(self, tiny_frames):
        net, _ = train(tiny_config(epochs=1), tiny_frames, GEOM)
        stack = net.stack_for(tiny_frames[0].image)
        a = network_forward(net, stack, dropout_active=True, rng=make_dropout_rng(1))
        b = network_forward(net, stack)
        assert not np.array_equal(a.raw, b.raw)


class TestFkGradient:
    def test_full_loss_gradient_matches_finite_differences(self):
        """Miniature conv net -> FK layer -> kinematic loss, all float64."""
        torch.manual_seed(0)

        class Mini(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.conv = torch.nn.Conv2d(3, 2, 3, padding=1)
                self.fc = torch.nn.Linear(2 * 8 * 6, 40)

            def forward(self, x):
                x = torch.relu(self.conv(x))
                x = torch.nn.functional.max_pool2d(x, 4)
                return self.fc(x.flatten(1))

        model = Mini().double()
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.normal(size=(2, 3, 32, 24)))
        truth = torch.from_numpy(rng.normal(size=(2, 10, 3)) * 0.2)
        true_l = torch.from_numpy(np.abs(rng.normal(size=(2, 17))) + 0.2)

        def full_loss():
            raw = model(x)
            root = raw[:, :3]
            angles = raw[:, 3:23]
            lengths = torch.nn.functional.softplus(raw[:, 23:]) + 1e-4
            joints = _fk_batch(root, angles, lengths)
            labeled = joints[:, list(skeleton.LABELED_JOINT_INDICES)]
            return loss_kinematic(labeled, lengths, truth, true_l, 0.5, 0.5)

        loss = full_loss()
        loss.backward()
        grads = {n: p.grad.clone() for n, p in model.named_parameters()}

        eps = 1e-6
        for name, param in model.named_parameters():
            flat = param.detach().view(-1)
            idx = rng.choice(flat.numel(), size=min(10, flat.numel()), replace=False)
            for i in idx:
                with torch.no_grad():
                    orig = float(flat[i])
                    flat[i] = orig + eps
                    up = float(full_loss())
                    flat[i] = orig - eps
                    down = float(full_loss())
                    flat[i] = orig
                fd = (up - down) / (2 * eps)
                an = float(grads[name].view(-1)[i])
                assert abs(an - fd) / max(abs(fd), 1e-6) < 1e-3, (name, i, an, fd)


class TestTraining:
    def test_seeded_determinism(self, tiny_frames):
        cfg = tiny_config(epochs=2, seed=9)
        net1, hist1 = train(cfg, tiny_frames, GEOM)
        net2, hist2 = train(cfg, tiny_frames, GEOM)
        assert hist1 == hist2
        for (k1, v1), (k2, v2) in zip(
            net1.model.state_dict().items(), net2.model.state_dict().items()
        ):
            assert k1 == k2
            assert torch.equal(v1, v2)

    def test_loss_decreases_4x_over_50_epochs(self, tiny_frames):
        subset = tiny_frames[:5] + tiny_frames[12:17]  # 10 frames, 2 people
        cfg = tiny_config(
            epochs=50, frames_per_epoch=5, batch_size=4, seed=2, augment=None
        )
        net, hist = train(cfg, subset, GEOM)
        assert hist[-1] < 0.25 * hist[0]

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_config(), [], GEOM)

    def test_divergence_aborts_with_diagnostic(self, tiny_frames):
        cfg = tiny_config(epochs=3, learning_rate=1e12)
        with pytest.raises(TrainingDiverged):
            train(cfg, tiny_frames, GEOM)

    def test_kinematic_pose_satisfies_link_lengths(self, tiny_frames):
        cfg = tiny_config(variant="kinematic_regress_l", epochs=1)
        net, _ = train(cfg, tiny_frames, GEOM)
        out = network_forward(net, net.stack_for(tiny_frames[3].image))
        for e in skeleton.DEFAULT_TOPOLOGY.edges:
            if e.parent == skeleton.SPINE_TOP or e.child == skeleton.SPINE_TOP:
                continue
            d = np.linalg.norm(out.all_joints[e.child] - out.all_joints[e.parent])
            assert abs(d - out.lengths[e.length_index]) < 1e-5


class TestPretrain:
    def test_initializes_both_variants_and_beats_scratch(self, tiny_frames):
        pre = pretrain_then_specialize(
            tiny_frames, GEOM, seed=4, epochs=3,
            base=tiny_config(variant="kinematic_regress_l"),
        )
        assert pre.config.alpha == 0.5 and pre.config.beta == 0.5
        for variant, beta in (("kinematic_const_l", 0.0), ("kinematic_regress_l", 0.5)):
            cfg = tiny_config(variant=variant, beta=beta, epochs=1, seed=11)
            net, hist_init = train(cfg, tiny_frames, GEOM, init=pre)
            assert net.model.fc.out_features == cfg.out_dim
        # pretrained initialization starts at a lower loss than scratch
        cfg = tiny_config(variant="kinematic_regress_l", epochs=1, seed=11)
        _, hist_scratch = train(cfg, tiny_frames, GEOM)
        _, hist_warm = train(cfg, tiny_frames, GEOM, init=pre)
        assert hist_warm[0] < hist_scratch[0]

    def test_l_star_is_frame_weighted_mean(self, tiny_frames):
        from pmpose.skeleton import approximate_link_lengths

        cfg = tiny_config(variant="kinematic_const_l", beta=0.0, epochs=1)
        net, _ = train(cfg, tiny_frames, GEOM)
        by_pid = {}
        for f in tiny_frames:
            by_pid.setdefault(f.image.participant_id, []).append(f)
        total = sum(len(v) for v in by_pid.values())
        expected = sum(
            approximate_link_lengths(v).l * len(v) for v in by_pid.values()
        ) / total
        np.testing.assert_allclose(net.l_star, expected, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tiny_frames, tmp_path):
        cfg = tiny_config(variant="kinematic_const_l", beta=0.0, epochs=1)
        net, _ = train(cfg, tiny_frames, GEOM)
        path = tmp_path / "model.ckpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        a = network_forward(net, net.stack_for(tiny_frames[0].image))
        b = network_forward(loaded, loaded.stack_for(tiny_frames[0].image))
        np.testing.assert_allclose(a.labeled_positions, b.labeled_positions, atol=1e-6)
        np.testing.assert_allclose(loaded.l_star, net.l_star, atol=1e-6)

    def test_bad_magic_rejected(self, tiny_frames, tmp_path):
        path = tmp_path / "m.ckpt"
        net, _ = train(tiny_config(epochs=1), tiny_frames, GEOM)
        save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        blob[:8] = b"XXXXXXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_truncated_blob_rejected(self, tiny_frames, tmp_path):
        path = tmp_path / "m.ckpt"
        net, _ = train(tiny_config(epochs=1), tiny_frames, GEOM)
        save_checkpoint(net, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 64])
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)


class TestPredict:
    def test_all_zero_frame_gives_finite_pose(self, tiny_frames):
        cfg = tiny_config(variant="kinematic_regress_l", epochs=1)
        net, _ = train(cfg, tiny_frames, GEOM)
        zero = PressureImage(np.zeros((64, 27)), 0.0, 999, 1)
        est = predict(net, zero)
        assert est.mean_pose.shape == (17, 3)
        assert np.all(np.isfinite(est.mean_pose))

    def test_geometry_mismatch_rejected(self, tiny_frames):
        net, _ = train(tiny_config(epochs=1), tiny_frames, GEOM)
        other = MatGeometry(taxel_pitch=0.05, bend_row=10)
        with pytest.raises(ConfigurationError):
            predict(net, tiny_frames[0].image, geom=other)
