import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from xvkit.embedder import (
    LossConfig,
    TrainConfig,
    Utterance,
    a_softmax_loss,
    am_softmax_loss,
    build_model,
    extract_embedding,
    grad_check,
    load_model,
    loss_and_grads,
    multitask_loss,
    psi,
    save_model,
    semiorth_deviation,
    semiorth_step,
    semiorth_update,
    softmax_loss,
    splice,
    stats_pool,
    train,
)
from xvkit.embedder.layers import POOL_EPS, ResidualBlock
from xvkit.embedder.losses import cosines
from xvkit.errors import ConfigError, DataError, EmptyInputError, NumericalError, ShapeError
from xvkit.netspec import builtin, parse_netspec

D64 = torch.float64


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class TestSplice:
    def test_identity(self):
        x = torch.randn(2, 5, 3)
        assert torch.equal(splice(x, (0,)), x)

    def test_clamped_rows(self):
        a, b, c = [1.0, 2.0], [3.0, 4.0], [5.0, 6.0]
        out = splice(torch.tensor([[a, b, c]]), (-1, 0))[0].numpy()
        assert_array_equal(out, [a + a, a + b, b + c])

    def test_width_and_length(self):
        out = splice(torch.randn(1, 7, 23), builtin("etdnn").layer("xvector", 1).contexts[0].offsets)
        assert out.shape == (1, 7, 5 * 23)

    def test_empty(self):
        assert splice(torch.zeros(1, 0, 3), (-1, 0, 1)).shape == (1, 0, 9)


class TestStatsPool:
    def test_constant_frames(self):
        v = torch.tensor([1.0, -2.0, 3.0], dtype=D64)
        out = stats_pool(v.repeat(1, 6, 1))[0].numpy()
        assert_allclose(out[:3], v.numpy())
        assert_allclose(out[3:], math.sqrt(POOL_EPS))

    def test_hand_example(self):
        out = stats_pool(torch.tensor([[[0.0], [2.0]]], dtype=D64))[0].numpy()
        assert_allclose(out, [1.0, 1.0])

    def test_two_pass_oracle(self):
        x = np.random.default_rng(0).normal(size=(7, 3))
        out = stats_pool(t64(x)[None])[0].numpy()
        mean = x.sum(axis=0) / 7
        std = np.sqrt(((x - mean) ** 2).sum(axis=0) / 7)
        assert_allclose(out, np.r_[mean, std], atol=1e-6)

    @given(st.integers(1, 20), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_permutation_and_duplication(self, T, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(T, 4))
        base = stats_pool(t64(x)[None])[0].numpy()
        perm = stats_pool(t64(x[rng.permutation(T)])[None])[0].numpy()
        dup = stats_pool(t64(np.vstack([x, x]))[None])[0].numpy()
        assert_allclose(perm, base, atol=1e-12)
        assert_allclose(dup, base, atol=1e-12)

    def test_no_frames(self):
        with pytest.raises(ValueError):
            stats_pool(torch.zeros(1, 0, 3))


def _full(name):
    spec = builtin(name).with_classes("xvector", 7)
    if "asr" in spec.branch_names:
        spec = spec.with_classes("asr", 5)
    return spec


class TestForward:
    @pytest.mark.parametrize("name,pooled,emb", [
        ("etdnn", 3000, 512), ("ftdnn", 4096, 1024), ("eftdnn", 4096, 1024),
        ("resnet", 2000, 512), ("multitask", 3000, 512), ("cvector", 3256, 512),
    ])
    def test_full_size_dims(self, name, pooled, emb):
        from xvkit.embedder import EmbedderNet

        model = EmbedderNet(_full(name), 23)
        with torch.no_grad():
            out = model(torch.randn(1, 6, 23))
        assert out.pooled.shape == (1, pooled)
        e = extract_embedding(model, np.random.default_rng(0).normal(size=(6, 23)), "u")
        assert e.dim == emb and e.source == name and e.utterance_id == "u"
        if name == "cvector":
            assert out.frames["xvector"][10].shape[2] + out.preact[("bottleneck", 5)].shape[2] == 1628

    def test_zero_weights_tap_equals_bias(self):
        model = build_model(builtin("etdnn"), 5, 3, width=1 / 16, dtype=D64)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.zero_()
            tap_bias = model.module_for("xvector", 12).linear.bias
            tap_bias.copy_(torch.arange(tap_bias.numel(), dtype=D64))
        out = model(torch.randn(1, 9, 5, dtype=D64))
        assert torch.equal(out.tap[0], tap_bias.detach())

    @pytest.mark.parametrize("name", ["etdnn", "ftdnn", "cvector", "resnet"])
    def test_tap_contract(self, name):
        model = build_model(builtin(name), 5, 3, width=1 / 16, num_senones=4, seed=2)
        with torch.no_grad():
            out = model(torch.randn(2, 12, 5))
            again = model.after_tap(out.tap)
        assert torch.equal(again, out.hidden["xvector"])

    def test_deterministic(self):
        model = build_model(builtin("ftdnn"), 5, 3, width=1 / 16)
        x = torch.randn(1, 10, 5)
        with torch.no_grad():
            assert torch.equal(model(x).tap, model(x).tap)

    def test_shape_error(self):
        model = build_model(builtin("etdnn"), 5, 3, width=1 / 16)
        with pytest.raises(ShapeError):
            model(torch.randn(1, 10, 6))
        with pytest.raises(EmptyInputError):
            extract_embedding(model, np.zeros((0, 5)))

    def test_constant_utterance_duplication(self):
        model = build_model(builtin("etdnn"), 5, 3, width=1 / 16, dtype=D64)
        frame = np.random.default_rng(1).normal(size=5)
        a = extract_embedding(model, np.tile(frame, (10, 1))).vector
        b = extract_embedding(model, np.tile(frame, (20, 1))).vector
        assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_residual_zero_kernels_pad_identity(self):
        block = ResidualBlock(2, 4).double()
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        x = torch.rand(1, 2, 5, 6, dtype=D64)  # non-negative, as after a ReLU
        out = block(x)
        assert torch.equal(out[:, :2], x)
        assert torch.equal(out[:, 2:], torch.zeros_like(out[:, 2:]))

    def test_multitask_sharing(self):
        model = build_model(builtin("multitask"), 5, 3, width=1 / 16, num_senones=4, dtype=D64)
        x = torch.randn(1, 15, 5, dtype=D64)
        with torch.no_grad():
            base = model(x)
            w1 = model.module_for("asr", 1).linear.weight
            saved = w1.clone()
            w1.add_(0.1)
            shared = model(x)
            w1.copy_(saved)
            model.module_for("asr", 3).linear.weight.add_(0.1)
            asr_only = model(x)
        assert model.module_for("asr", 1) is model.module_for("xvector", 1)
        assert not torch.equal(shared.frames["xvector"][10], base.frames["xvector"][10])
        assert not torch.equal(shared.frames["asr"][7], base.frames["asr"][7])
        assert torch.equal(asr_only.frames["xvector"][10], base.frames["xvector"][10])
        assert not torch.equal(asr_only.frames["asr"][7], base.frames["asr"][7])


class TestAmSoftmax:
    def test_reduces_to_softmax(self):
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(6, 4)) * 3, rng.normal(size=(5, 4))
        y = torch.as_tensor(rng.integers(5, size=6))
        got = am_softmax_loss(t64(x), y, t64(w), m=0.0, s=1.0)
        xn = x / np.linalg.norm(x, axis=1, keepdims=True)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        logits = xn @ wn.T
        ref = np.mean(np.log(np.exp(logits).sum(axis=1)) - logits[np.arange(6), y.numpy()])
        assert abs(float(got) - ref) < 1e-9

    def test_closed_form(self):
        x = np.array([[1.0, 0.0]])
        w = np.array([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)]])
        got = float(am_softmax_loss(t64(x), torch.tensor([0]), t64(w), m=0.15, s=30.0))
        assert got == pytest.approx(math.log1p(math.exp(30 * (0.10 - 0.75))), rel=1e-9)
        assert got == pytest.approx(3.4e-9, rel=0.05)

    @given(st.floats(-0.95, 0.95), st.floats(0.0, 0.04), st.floats(-0.3, 0.3), st.floats(0, 0.5), st.floats(0, 0.5))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, c, dc, d, m1, dm):
        w = np.eye(3)[:2]

        def loss(cy, m):
            z = math.sqrt(max(1 - cy**2 - d**2, 0.0))
            return float(am_softmax_loss(t64([[cy, d, z]]), torch.tensor([0]), t64(w), m=m, s=30.0))

        c2 = min(c + dc, math.sqrt(1 - d**2))
        assert loss(c2, m1) <= loss(c, m1) + 1e-12
        assert loss(c, m1 + dm) >= loss(c, m1) - 1e-12

    def test_margin_increases_loss(self):
        rng = np.random.default_rng(3)
        x, w = t64(rng.normal(size=(4, 6))), t64(rng.normal(size=(3, 6)))
        y = torch.tensor([0, 1, 2, 0])
        assert float(am_softmax_loss(x, y, w, m=0.15)) > float(am_softmax_loss(x, y, w, m=0.0))

    def test_nonfinite(self):
        with pytest.raises(NumericalError):
            am_softmax_loss(t64([[np.nan, 1.0]]), torch.tensor([0]), t64(np.eye(2)))

    def test_numpy_wrapper(self):
        loss, grads = loss_and_grads(am_softmax_loss, np.ones((1, 3)), [1], np.eye(3))
        assert grads["x"].shape == (1, 3) and grads["weight"].shape == (3, 3) and loss > 0


class TestASoftmax:
    def test_psi_values(self):
        for m in (1, 2, 3, 4):
            assert psi(0.0, m) == pytest.approx(1.0)
        assert psi(math.pi / 3, 4) == pytest.approx(-1.5, abs=1e-12)

    @given(st.integers(1, 4), st.floats(0, math.pi), st.floats(0, math.pi))
    @settings(max_examples=200, deadline=None)
    def test_psi_monotone(self, m, a, b):
        lo, hi = min(a, b), max(a, b)
        assert psi(hi, m) <= psi(lo, m) + 1e-9

    @pytest.mark.parametrize("lam", [math.inf, 0.0, 7.0])
    def test_m1_reduces_to_softmax(self, lam):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        y = torch.as_tensor(rng.integers(3, size=5))
        got = float(a_softmax_loss(t64(x), y, t64(w), m=1, lam=lam))
        logits = x @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
        ref = float(F.cross_entropy(t64(logits), y))
        assert abs(got - ref) < 1e-9

    def test_target_logit_matches_psi(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(1, 3)), rng.normal(size=(2, 3))
        cos = float(cosines(t64(x), t64(w))[0, 0])
        theta = math.acos(cos)
        r = np.linalg.norm(x)
        target = r * float(psi(theta, 4))
        other = r * float(cosines(t64(x), t64(w))[0, 1])
        ref = math.log(math.exp(target) + math.exp(other)) - target
        assert float(a_softmax_loss(t64(x), torch.tensor([0]), t64(w), m=4, lam=0.0)) == pytest.approx(ref, rel=1e-10)

    def test_bad_m(self):
        with pytest.raises(ConfigError):
            a_softmax_loss(t64(np.ones((1, 2))), torch.tensor([0]), t64(np.eye(2)), m=5)
        with pytest.raises(ConfigError):
            LossConfig(kind="a_softmax", angular_margin=0)

    def test_annealing_schedule(self):
        cfg = LossConfig(kind="a_softmax")
        assert cfg.annealing_lambda(0) == 1000.0
        assert cfg.annealing_lambda(10**9) == 5.0


class TestLossConfig:
    @pytest.mark.parametrize("kw", [{"kind": "arcface"}, {"margin": -1}, {"scale": 0}, {"multitask_weight": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw)


class TestMultitaskLoss:
    def _setup(self, weight=1.0):
        model = build_model(builtin("multitask"), 5, 3, width=1 / 16, num_senones=4, dtype=D64, seed=3)
        g = torch.Generator().manual_seed(0)
        x = torch.randn(2, 12, 5, generator=g, dtype=D64)
        y = torch.tensor([0, 2])
        fl = torch.randint(4, (2, 12), generator=g)
        return model, x, y, fl, LossConfig(kind="softmax", multitask_weight=weight)

    def test_sum_of_terms(self):
        model, x, y, fl, cfg = self._setup(0.7)
        out = model(x)
        total, parts = multitask_loss(out, model, y, fl, cfg)
        # independent recomputation of both terms
        h = out.hidden["xvector"]
        logits = h @ model.out_weight["xvector"].T + model.out_bias["xvector"]
        spk = -(logits.log_softmax(dim=1)[torch.arange(2), y]).mean()
        ha = out.frames["asr"][7]
        la = (ha @ model.out_weight["asr"].T + model.out_bias["asr"]).log_softmax(dim=2)
        ph = -la.gather(2, fl[..., None]).mean()
        assert abs(total.item() - (spk + 0.7 * ph).item()) < 1e-9
        assert abs(parts["phonetic"].item() - ph.item()) < 1e-9

    def test_zero_weight_is_speaker_only(self):
        model, x, y, fl, cfg = self._setup(0.0)
        total, parts = multitask_loss(model(x), model, y, fl, cfg)
        assert total.item() == parts["speaker"].item()

    def test_phonetic_gradient_reaches_only_shared_and_asr(self):
        model, x, y, fl, cfg = self._setup()
        _, parts = multitask_loss(model(x), model, y, fl, cfg)
        parts["phonetic"].backward()
        for name, p in model.named_parameters():
            nonzero = p.grad is not None and float(p.grad.abs().sum()) > 0
            expect = name.startswith("layers.xvector_1.") or "asr" in name
            assert nonzero == expect, name

    def test_label_mismatch(self):
        model, x, y, fl, cfg = self._setup()
        with pytest.raises(ShapeError):
            multitask_loss(model(x), model, y, fl[:, :-1], cfg)


class TestSemiOrth:
    def test_fixed_point(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(16, 4)))
        m = t64(2.5 * q.T)
        assert_allclose(semiorth_update(m).numpy(), m.numpy(), atol=1e-9)

    def test_converges(self):
        m = t64(np.random.default_rng(1).normal(size=(4, 16)))
        for _ in range(100):
            m = semiorth_update(m)
        assert semiorth_deviation(m.numpy()) < 1e-3

    def test_alpha_zero(self):
        m = t64(np.random.default_rng(2).normal(size=(4, 16)))
        assert torch.equal(semiorth_update(m, alpha=0.0), m)

    def test_model_factors(self):
        model = build_model(builtin("ftdnn"), 5, 3, width=1 / 8, dtype=D64)
        for _ in range(100):
            semiorth_step(model)
        assert max(semiorth_deviation(f.weight.detach().numpy()) for f in model.ftdnn_factors()) < 1e-3


def _two_speakers(n=8, T=40, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for spk, center in enumerate((-3.0, 3.0)):
        for _ in range(n):
            data.append(Utterance(rng.normal(size=(T, dim)) + center, spk))
    return data


TINY = TrainConfig(steps=60, batch_size=8, chunk_frames=20, heldout_size=8)


class TestTrain:
    def test_separable_accuracy(self):
        model = build_model(builtin("etdnn"), 5, 2, width=1 / 16)
        data = _two_speakers()
        res = train(model, data, LossConfig(kind="am_softmax"), TINY, seed=0)
        assert res.heldout_after < res.heldout_before
        with torch.no_grad():
            hidden = model(torch.as_tensor(np.stack([u.feats for u in data]), dtype=torch.float32)).hidden["xvector"]
            pred = cosines(hidden, model.out_weight["xvector"]).argmax(dim=1).numpy()
        assert np.mean(pred == [u.speaker for u in data]) >= 0.99

    def test_zero_lr(self):
        model = build_model(builtin("ftdnn"), 5, 2, width=1 / 16)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(model, _two_speakers(), LossConfig(), TrainConfig(learning_rate=0.0, steps=5, batch_size=4,
                                                                 chunk_frames=10, heldout_size=4))
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_seeded_determinism(self):
        states = []
        for _ in range(2):
            model = build_model(builtin("ftdnn"), 5, 2, width=1 / 16, seed=4)
            train(model, _two_speakers(), LossConfig(kind="a_softmax"), TrainConfig(steps=10, batch_size=4,
                                                                                    chunk_frames=10, heldout_size=4), seed=9)
            states.append(model.state_dict())
        for k in states[0]:
            assert torch.equal(states[0][k], states[1][k])

    def test_needs_two_speakers(self):
        model = build_model(builtin("etdnn"), 5, 2, width=1 / 16)
        with pytest.raises(DataError):
            train(model, [u for u in _two_speakers() if u.speaker == 0], LossConfig(), TINY)

    def test_multitask_needs_frame_labels(self):
        model = build_model(builtin("multitask"), 5, 2, width=1 / 16, num_senones=3)
        with pytest.raises(DataError):
            train(model, _two_speakers(), LossConfig(kind="softmax"), TINY)

    def test_save_load(self, tmp_path):
        model = build_model(builtin("cvector"), 5, 2, width=1 / 16, num_senones=3, seed=5)
        save_model(tmp_path / "m.xvkt", model, LossConfig(kind="softmax"))
        back, loss = load_model(tmp_path / "m.xvkt")
        assert loss == LossConfig(kind="softmax")
        assert back.spec == model.spec
        x = np.random.default_rng(0).normal(size=(9, 5))
        assert_array_equal(back.embed(x), model.embed(x))


class TestGradCheck:
    def test_tiny_etdnn_am(self):
        rep = grad_check(builtin("etdnn"), LossConfig(kind="am_softmax"))
        assert rep.checked > 0 and rep.max_rel_error < 1e-4

    def test_linear_net(self):
        spec = parse_netspec("name lin\nbranch a\n1 dense f1=t size=4\n2 pooling size=8\n"
                             "3 embedding_tap size=3\n4 output_softmax\ntap a 3\n")
        assert grad_check(spec, LossConfig(kind="softmax"), width=1.0).max_rel_error < 1e-7

    def test_cvector_bottleneck_gradient(self):
        rep = grad_check(builtin("cvector"), LossConfig(kind="softmax"))
        assert rep.bottleneck_grad_norm is not None and rep.bottleneck_grad_norm > 0
