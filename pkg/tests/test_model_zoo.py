import numpy as np
import pytest
import torch
import torch.nn as nn

from genreplay.errors import ConfigurationError, DimensionError, UnsupportedArchitectureError
from genreplay.models import (
    BN_MOMENTUM,
    ArchSpec,
    BNStats,
    Generator,
    GeneratorSpec,
    IncrementalClassifier,
    describe_checkpoint,
    expand_head,
    extract_bn_stats,
    forward,
    generate,
    load_checkpoint,
    new_classifier,
    new_generator,
    parameter_digest,
    read_checkpoint,
    sample_noise,
    save_classifier,
    save_generator,
)

DESK = ArchSpec("desk", (3, 8, 8), (4, 8, 8, 8))


def probe(n=6, shape=(3, 8, 8), seed=0):
    return torch.randn(n, *shape, generator=torch.Generator().manual_seed(seed))


class TestForward:
    def test_logit_width(self):
        clf = expand_head(new_classifier(DESK, 20, seed=0), 20, init_seed=1)
        assert forward(clf, probe(4), "eval").shape == (4, 40)

    def test_eval_rows_identical_for_repeated_image(self):
        clf = new_classifier(DESK, 5, seed=0)
        x = probe(1).repeat(2, 1, 1, 1)
        out = forward(clf, x, "eval")
        assert torch.equal(out[0], out[1])

    def test_zero_weight_head_gives_bias(self):
        clf = new_classifier(DESK, 3, seed=0)
        clf = expand_head(clf, 4, init_seed=2)
        with torch.no_grad():
            clf.heads[1].weight.zero_()
        out = forward(clf, probe(5), "eval")
        assert torch.equal(out[:, 3:], clf.heads[1].bias.expand(5, 4))

    def test_shape_mismatch(self):
        clf = new_classifier(DESK, 3, seed=0)
        with pytest.raises(DimensionError):
            forward(clf, torch.zeros(2, 3, 16, 16))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            forward(new_classifier(DESK, 3, seed=0), probe(2), "infer")

    def test_train_mode_updates_running_stats(self):
        clf = new_classifier(DESK, 3, seed=0)
        before = parameter_digest(clf)
        forward(clf, probe(8), "train")
        assert parameter_digest(clf) != before
        snap = parameter_digest(clf)
        forward(clf, probe(8), "eval")
        assert parameter_digest(clf) == snap

    def test_unknown_trunk(self):
        with pytest.raises(ConfigurationError):
            new_classifier(ArchSpec("vgg", (3, 8, 8)), 3, seed=0)

    def test_full_scale_tier_resnet(self):
        clf = new_classifier(ArchSpec("resnet18", (3, 32, 32), ()), 10, seed=0)
        assert forward(clf, torch.zeros(2, 3, 32, 32)).shape == (2, 10)
        assert len(extract_bn_stats(clf)) == 20


class TestExpandHead:
    def test_preserves_old_columns(self):
        clf = new_classifier(DESK, 20, seed=0)
        x = probe()
        old = forward(clf, x)
        before = parameter_digest(clf)
        grown = expand_head(clf, 20, init_seed=7)
        assert grown.head_widths == [20, 20]
        assert torch.equal(forward(grown, x)[:, :20], old)
        # input classifier untouched
        assert parameter_digest(clf) == before and clf.head_widths == [20]

    def test_old_parameters_bit_identical(self):
        clf = new_classifier(DESK, 5, seed=0)
        grown = expand_head(clf, 3, init_seed=1)
        for (n, a), (_, b) in zip(clf.state_dict().items(), grown.state_dict().items()):
            assert torch.equal(a, b), n

    def test_ordering(self):
        clf = expand_head(expand_head(new_classifier(DESK, 20, seed=0), 10, 1), 10, 2)
        assert clf.head_widths == [20, 10, 10]
        assert clf.num_classes == 40

    def test_same_seed_same_weights(self):
        clf = new_classifier(DESK, 5, seed=0)
        a = expand_head(clf, 4, init_seed=9)
        b = expand_head(clf, 4, init_seed=9)
        assert torch.equal(a.heads[1].weight, b.heads[1].weight)
        assert torch.equal(a.heads[1].bias, b.heads[1].bias)

    def test_rejects_zero_width(self):
        with pytest.raises(ValueError):
            expand_head(new_classifier(DESK, 5, seed=0), 0, init_seed=1)

    def test_seeded_classifier_deterministic(self):
        assert parameter_digest(new_classifier(DESK, 5, 3)) == parameter_digest(new_classifier(DESK, 5, 3))
        assert parameter_digest(new_classifier(DESK, 5, 3)) != parameter_digest(new_classifier(DESK, 5, 4))


class TestBNStats:
    def test_fresh_layers(self):
        stats = extract_bn_stats(new_classifier(DESK, 3, seed=0))
        assert len(stats) == 4
        for s in stats:
            assert torch.equal(s.mean, torch.zeros(s.channel_count))
            assert torch.equal(s.variance, torch.ones(s.channel_count))

    def test_copies(self):
        clf = new_classifier(DESK, 3, seed=0)
        stats = extract_bn_stats(clf)
        stats[0].mean.add_(5.0)
        assert float(clf.bn_layers()[0].running_mean.abs().max()) == 0.0

    def test_no_bn_layers(self):
        clf = new_classifier(DESK, 3, seed=0)
        clf.trunk = nn.Sequential(nn.Flatten(), nn.Linear(192, 8))
        clf.trunk.out_dim = 8
        with pytest.raises(UnsupportedArchitectureError):
            extract_bn_stats(clf)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            BNStats(torch.zeros(2), torch.tensor([1.0, -0.1]))
        with pytest.raises(DimensionError):
            BNStats(torch.zeros(2), torch.ones(3))

    def test_running_mean_matches_ema_oracle(self):
        clf = new_classifier(DESK, 3, seed=0)
        bn = clf.bn_layers()[0]
        logged = []
        hook = bn.register_forward_hook(lambda m, i, o: logged.append(i[0].detach().double().mean(dim=(0, 2, 3))))
        c = 0.3
        for _ in range(60):
            forward(clf, torch.full((4, 3, 8, 8), c) + 0.01 * probe(4), "train")
        hook.remove()
        ema = np.zeros(bn.num_features)
        for m in logged:
            ema = (1 - BN_MOMENTUM) * ema + BN_MOMENTUM * m.numpy()
        np.testing.assert_allclose(bn.running_mean.double().numpy(), ema, atol=1e-5)
        # converged: the residual weight of the zero initial value is 0.9^60
        assert np.abs(ema - logged[-1].numpy()).max() < 0.01 + 0.9 ** 60 * np.abs(logged[-1].numpy()).max()


class TestGenerator:
    SPEC = GeneratorSpec(16, (3, 8, 8), 8, "desk")

    def test_batch_512(self):
        g = new_generator(self.SPEC, 5, seed=0)
        z = sample_noise(g, 512, torch.Generator().manual_seed(0))
        assert generate(g, z).shape == (512, 3, 8, 8)

    def test_deterministic(self):
        g = new_generator(self.SPEC, 5, seed=0)
        z = sample_noise(g, 8, torch.Generator().manual_seed(0))
        assert torch.equal(generate(g, z), generate(g, z))
        assert g.training

    def test_range_over_10k(self):
        g = new_generator(self.SPEC, 5, seed=0)
        with torch.no_grad():
            for b in range(5):
                x = generate(g, sample_noise(g, 2000, torch.Generator().manual_seed(b)) * 5)
                assert float(x.min()) >= -1 and float(x.max()) <= 1

    def test_width_mismatch(self):
        g = new_generator(self.SPEC, 5, seed=0)
        with pytest.raises(DimensionError):
            generate(g, torch.zeros(3, 15))

    def test_dcgan_style(self):
        g = new_generator(GeneratorSpec(20, (3, 32, 32), 8, "dcgan"), 10, seed=0)
        assert generate(g, torch.randn(2, 20)).shape == (2, 3, 32, 32)
        with pytest.raises(ConfigurationError):
            Generator(GeneratorSpec(20, (3, 24, 24), 8, "dcgan"))

    def test_seeded_init(self):
        a, b = new_generator(self.SPEC, 5, 1), new_generator(self.SPEC, 5, 1)
        assert parameter_digest(a) == parameter_digest(b)


class TestCheckpoints:
    def test_classifier_round_trip_bitwise(self, tmp_path):
        clf = expand_head(new_classifier(DESK, 4, seed=0), 3, 1)
        forward(clf, probe(8), "train")
        path = save_classifier(clf, tmp_path / "c.pt", config_hash="abc")
        back = load_checkpoint(path)
        x = probe(5, seed=3)
        assert torch.equal(forward(clf, x), forward(back, x))
        assert back.head_widths == [4, 3]
        info = describe_checkpoint(path)
        assert info["kind"] == "classifier" and info["config_hash"] == "abc" and info["bn_layers"] == 4
        assert not list(tmp_path.glob("*.tmp"))

    def test_float64_round_trip(self, tmp_path):
        clf = new_classifier(DESK, 4, seed=0).double()
        back = load_checkpoint(save_classifier(clf, tmp_path / "c.pt"))
        x = probe(3).double()
        assert torch.equal(forward(clf, x), forward(back, x))

    def test_generator_round_trip(self, tmp_path):
        spec = GeneratorSpec(16, (3, 8, 8), 8, "desk")
        g = new_generator(spec, 7, seed=2)
        back = load_checkpoint(save_generator(g, tmp_path / "g.pt"))
        z = torch.randn(4, 16)
        assert torch.equal(generate(g, z), generate(back, z))
        assert back.covered_classes == 7

    def test_rejects_foreign_file(self, tmp_path):
        torch.save({"hello": 1}, tmp_path / "x.pt")
        with pytest.raises(ConfigurationError):
            read_checkpoint(tmp_path / "x.pt")


class TestGradientSanity:
    def test_classifier_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        arch = ArchSpec("desk", (1, 4, 4), (3, 3))
        clf = new_classifier(arch, 3, seed=0).double()
        clf.train()
        x = torch.randn(5, 1, 4, 4, dtype=torch.float64)
        w = torch.randn(5, 3, dtype=torch.float64)

        def loss():
            return (clf(x) * w).sum() + clf(x).pow(2).sum() * 0.1

        params = [p for p in clf.parameters()]
        grads = torch.autograd.grad(loss(), params)
        eps, checked, worst = 1e-6, 0, 0.0
        with torch.no_grad():
            for p, g in zip(params, grads):
                flat, gflat = p.view(-1), g.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    up = loss().item()
                    flat[i] = orig - eps
                    down = loss().item()
                    flat[i] = orig
                    num = (up - down) / (2 * eps)
                    rel = abs(num - gflat[i].item()) / max(abs(num), abs(gflat[i].item()), 1e-8)
                    worst = max(worst, rel)
                    checked += 1
        assert checked >= 100
        assert worst <= 1e-3
