import math

import numpy as np
import pytest
import torch

from conftest import PARAM_GROUPS, group_gradient_errors, micro_batch, micro_config
from progre.audio import FrameFeatures
from progre.encoder import build_model
from progre.objectives import (
    LinearWarmupDecay,
    LossWeights,
    NonFiniteLossError,
    compute_losses,
    content_loss,
    cosine,
    feature_penalty,
    make_optimizer,
    pretrain_step,
    speaker_loss,
    total_loss,
)


def _eye(n):
    return torch.eye(n, dtype=torch.float64)


class TestFeaturePenalty:
    def test_matches_numpy(self, rng):
        x = rng.standard_normal((7, 5))
        assert float(feature_penalty(torch.tensor(x))) == pytest.approx((x ** 2).mean(), abs=1e-12)

    def test_zero_and_framefeatures(self):
        assert float(feature_penalty(torch.zeros(3, 4))) == 0.0
        ff = FrameFeatures(np.full((2, 3), 2.0))
        assert float(feature_penalty(ff)) == 4.0


class TestSpeakerLoss:
    @pytest.mark.parametrize("sign,expected", [(1, math.log1p(math.exp(-1))), (0, math.log(2)),
                                               (-1, math.log1p(math.e))])
    def test_anchor_values(self, sign, expected):
        o = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        s = torch.tensor([1.0, 0.0, 0.0]) if sign else torch.tensor([0.0, 1.0, 0.0])
        s = s * (sign if sign else 1)
        loss = speaker_loss(o, s, _eye(3), torch.tensor([True]))
        assert abs(float(loss) - expected) < 1e-9

    def test_scale_invariance(self, rng):
        o = torch.tensor(rng.standard_normal((6, 4)))
        s = torch.tensor(rng.standard_normal(3))
        A = torch.tensor(rng.standard_normal((4, 3)))
        mask = torch.tensor([1, 0, 1, 1, 0, 0], dtype=torch.bool)
        base = speaker_loss(o, s, A, mask)
        assert torch.allclose(speaker_loss(3.0 * o, 0.2 * s, A, mask), base, atol=1e-12)

    def test_zero_vector_is_finite(self):
        loss = speaker_loss(torch.zeros(2, 3, dtype=torch.float64), torch.ones(3), _eye(3), torch.ones(2, dtype=torch.bool))
        assert float(loss) == pytest.approx(math.log(2), abs=1e-12)

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError, match="masked"):
            speaker_loss(torch.zeros(2, 3), torch.ones(3), torch.eye(3), torch.zeros(2, dtype=torch.bool))


class TestContentLoss:
    def test_single_unit_is_zero(self, rng):
        o = torch.tensor(rng.standard_normal((5, 4)))
        E = torch.tensor(rng.standard_normal((1, 4)))
        loss = content_loss(o, torch.zeros(5, dtype=torch.long), _eye(4), E, torch.ones(5, dtype=torch.bool))
        assert abs(float(loss)) < 1e-9

    def test_symmetric_two_units_is_log2(self):
        o = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        E = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        loss = content_loss(o, torch.tensor([1]), _eye(2), E, torch.tensor([True]))
        assert abs(float(loss) - math.log(2)) < 1e-9

    def test_matches_softmax_oracle(self, rng):
        o, A, E = (rng.standard_normal(s) for s in [(6, 5), (5, 3), (4, 3)])
        z = rng.integers(0, 4, 6)
        mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
        proj = o @ A
        cos = (proj @ E.T) / np.outer(np.linalg.norm(proj, axis=1), np.linalg.norm(E, axis=1))
        logits = cos / 0.1
        logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        expected = -logp[np.arange(6), z][mask].mean()
        got = content_loss(*(torch.tensor(v) for v in (o, z, A, E)), torch.tensor(mask))
        assert float(got) == pytest.approx(expected, abs=1e-10)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            content_loss(torch.zeros(1, 2), [0], torch.eye(2), torch.eye(2), [True], tau=0.0)


class TestLocality:
    @pytest.mark.parametrize("seed", range(10))
    def test_unmasked_mutation_is_inert(self, seed):
        rng = np.random.default_rng(seed)
        B, T, D, K, U = 2, 9, 5, 4, 6
        o = torch.tensor(rng.standard_normal((B, T, D)))
        A_s, A_c = torch.tensor(rng.standard_normal((D, K))), torch.tensor(rng.standard_normal((D, 3)))
        E = torch.tensor(rng.standard_normal((U, 3)))
        mask = torch.tensor(rng.random((B, T)) < 0.4)
        mask[0, 0] = True
        mask[1, -1] = False
        z = torch.tensor(rng.integers(0, U, (B, T)))
        s = torch.tensor(rng.standard_normal((B, T, K)))
        lc, ls = content_loss(o, z, A_c, E, mask), speaker_loss(o, s, A_s, mask)

        z2, s2 = z.clone(), s.clone()
        z2[~mask] = (z2[~mask] + 1) % U
        s2[~mask] = torch.tensor(rng.standard_normal((int((~mask).sum()), K)))
        assert content_loss(o, z2, A_c, E, mask).item() == lc.item()
        assert speaker_loss(o, s2, A_s, mask).item() == ls.item()

        z3, s3 = z.clone(), s.clone()
        z3[0, 0] = (z3[0, 0] + 1) % U
        s3[0, 0] = -s3[0, 0]
        assert content_loss(o, z3, A_c, E, mask).item() != lc.item()
        assert speaker_loss(o, s3, A_s, mask).item() != ls.item()


class TestTotal:
    def test_weights(self):
        b = total_loss(0.5, 2.0, 3.0)
        assert float(b.total) == pytest.approx(10 * 0.5 + 2.0 + 3.0)

    def test_linearity(self):
        w = LossWeights(2.0, 3.0, 5.0)
        parts = [(1.0, 0, 0), (0, 1.0, 0), (0, 0, 1.0)]
        unit = [float(total_loss(*p, weights=w).total) for p in parts]
        assert unit == [2.0, 3.0, 5.0]
        assert float(total_loss(0.3, 0.7, 1.1, weights=w).total) == pytest.approx(2 * 0.3 + 3 * 0.7 + 5 * 1.1)

    def test_compute_losses_requires_mask(self, micro_model, micro_cfg):
        b = micro_batch(micro_cfg)
        out = micro_model(b.wav, b.pitch)
        with pytest.raises(ValueError, match="mask"):
            compute_losses(micro_model, out, b.labels, b.speaker_targets)


class TestSchedule:
    def test_shape(self):
        s = LinearWarmupDecay(100, peak_lr=1.0, warmup_frac=0.08)
        assert s.warmup_steps == 8
        assert s(0) == 0.0 and s(4) == 0.5 and s(8) == 1.0
        assert s(54) == pytest.approx(0.5)
        assert s(100) == 0.0 and s(150) == 0.0

    def test_monotone(self):
        s = LinearWarmupDecay(200, peak_lr=5e-4)
        lrs = [s(k) for k in range(201)]
        peak = int(np.argmax(lrs))
        assert peak == 16 and max(lrs) == 5e-4
        assert all(a <= b for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
        assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))

    def test_optimizer_hyperparameters(self, micro_model):
        opt = make_optimizer(micro_model)
        g = opt.param_groups[0]
        assert isinstance(opt, torch.optim.AdamW)
        assert g["betas"] == (0.9, 0.98) and g["eps"] == 1e-6 and g["weight_decay"] == 0.01


class TestStep:
    def test_step_zero_leaves_parameters(self, micro_model, micro_cfg):
        before = {k: v.clone() for k, v in micro_model.state_dict().items() if "running" not in k and "num_batches" not in k}
        opt = make_optimizer(micro_model)
        _, lr = pretrain_step(micro_model, opt, micro_batch(micro_cfg), 0, LinearWarmupDecay(100))
        assert lr == 0.0
        after = micro_model.state_dict()
        for k, v in before.items():
            assert torch.equal(v, after[k]), k

    def test_joint_update_touches_every_group(self, micro_model, micro_cfg):
        micro_model.train()
        b = micro_batch(micro_cfg)
        out = micro_model(b.wav, b.pitch, b.mask)
        compute_losses(micro_model, out, b.labels, b.speaker_targets).total.backward()
        for group in PARAM_GROUPS:
            norm = sum(float(p.grad.norm()) for n, p in micro_model.named_parameters() if n.split(".")[0] == group)
            assert norm > 0, group

    def test_overfits_fixed_batch(self, micro_cfg):
        model = build_model(micro_cfg, 0, torch.float64)
        opt = make_optimizer(model)
        b = micro_batch(micro_cfg)
        sched = LinearWarmupDecay(200, peak_lr=1e-2, warmup_frac=0.0)
        totals = [pretrain_step(model, opt, b, k, sched)[0].as_floats()["total"] for k in range(150)]
        assert totals[-1] < 0.5 * totals[0]

    def test_non_finite_raises(self, micro_model, micro_cfg):
        with torch.no_grad():
            micro_model.projections.A_c.fill_(float("nan"))
        opt = make_optimizer(micro_model)
        with pytest.raises(NonFiniteLossError) as info:
            pretrain_step(micro_model, opt, micro_batch(micro_cfg), 3, LinearWarmupDecay(10))
        assert info.value.breakdown["step"] == 3
        assert math.isnan(info.value.breakdown["l_c"])


def test_cosine_guard():
    assert float(cosine(torch.zeros(3), torch.ones(3))) == 0.0


@pytest.mark.slow
def test_gradients_match_finite_differences():
    model = build_model(micro_config(), 0, torch.float64)
    errors = group_gradient_errors(model, micro_batch(model.cfg))
    for group, (err, scale) in errors.items():
        assert scale > 0, group
        assert err < 1e-4, (group, err)
