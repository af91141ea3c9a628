import math

import numpy as np
import pytest
import torch

from itlm import model as nnm
from itlm.model import (
    AdamState,
    ResUnet,
    WeightsError,
    adam_step,
    batch_norm,
    conv2d,
    cross_entropy_masked,
    grad_check,
    load_weights,
    make_clp_model,
    make_property_model,
    mse_masked,
    save_weights,
)

torch.manual_seed(0)


class TestConv2d:
    def test_1x1_identity(self):
        x = torch.randn(1, 3, 8, 8)
        w = torch.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(x, w)
        torch.testing.assert_close(out, x)

    def test_3x3_ones_on_constant_input(self):
        c = 2.5
        x = torch.full((1, 1, 6, 6), c)
        w = torch.ones(1, 1, 3, 3)
        out = conv2d(x, w)
        torch.testing.assert_close(out, torch.full_like(x, 9 * c))

    def test_stride_2_halves_dims(self):
        x = torch.randn(1, 4, 64, 64)
        w = torch.randn(8, 4, 3, 3)
        assert conv2d(x, w, stride=2).shape == (1, 8, 32, 32)


class TestBatchNorm:
    def test_train_normalizes(self):
        x = torch.randn(8, 4, 16, 16) * 3 + 7
        scale, offset = torch.ones(4), torch.zeros(4)
        rm, rv = torch.zeros(4), torch.ones(4)
        out = batch_norm(x, scale, offset, rm, rv, train=True)
        torch.testing.assert_close(out.mean(dim=(0, 2, 3)), torch.zeros(4), atol=1e-5, rtol=0)
        torch.testing.assert_close(out.var(dim=(0, 2, 3), unbiased=False), torch.ones(4), atol=1e-3, rtol=0)

    def test_eval_uses_running_stats(self):
        x = torch.randn(2, 3, 4, 4)
        mu = torch.tensor([1.0, 2.0, 3.0])
        out = batch_norm(x, torch.ones(3), torch.zeros(3), mu.clone(), torch.ones(3), train=False, eps=0.0)
        torch.testing.assert_close(out, x - mu[None, :, None, None])

    def test_batch_of_one_rejected_in_train(self):
        x = torch.randn(1, 3, 4, 4)
        with pytest.raises(ValueError):
            batch_norm(x, torch.ones(3), torch.zeros(3), torch.zeros(3), torch.ones(3), train=True)


class TestResUnetForward:
    @pytest.mark.parametrize("size", [32, 64])
    def test_spatial_dims_preserved(self, size):
        m = make_clp_model(23).eval()
        out = m(torch.randn(1, 23, size, size))
        assert out.shape == (1, 3, size, size)

    def test_property_model_single_map(self):
        m = make_property_model(24).eval()
        out = m(torch.randn(1, 24, 64, 64))
        assert out.shape == (1, 1, 64, 64)

    def test_softmax_normalized(self):
        m = make_clp_model(23).eval()
        p = torch.softmax(m(torch.randn(2, 23, 64, 64)), dim=1)
        torch.testing.assert_close(p.sum(dim=1), torch.ones(2, 64, 64), atol=1e-6, rtol=0)

    def test_eval_is_pure_per_sample(self):
        m = make_clp_model(23).eval()
        x = torch.randn(3, 23, 32, 32)
        with torch.no_grad():
            out = m(x)
            perm = m(x[[2, 0, 1]])
        torch.testing.assert_close(perm, out[[2, 0, 1]])


class TestLosses:
    def test_ce_uniform_logits(self):
        logits = torch.zeros(1, 3, 4, 4)
        labels = torch.randint(0, 3, (1, 4, 4))
        mask = torch.ones(1, 4, 4, dtype=torch.bool)
        loss = cross_entropy_masked(logits, labels, mask)
        assert float(loss) == pytest.approx(math.log(3), abs=1e-6)

    def test_ce_confident_correct_goes_to_zero(self):
        labels = torch.zeros(1, 2, 2, dtype=torch.long)
        logits = torch.zeros(1, 3, 2, 2)
        logits[:, 0] = 50.0
        mask = torch.ones(1, 2, 2, dtype=torch.bool)
        assert float(cross_entropy_masked(logits, labels, mask)) < 1e-6

    def test_ce_mask_excludes_pixels(self):
        logits = torch.randn(1, 3, 2, 2)
        labels = torch.zeros(1, 2, 2, dtype=torch.long)
        mask = torch.ones(1, 2, 2, dtype=torch.bool)
        mask[0, 0, 0] = False
        base = float(cross_entropy_masked(logits, labels, mask))
        labels2 = labels.clone()
        labels2[0, 0, 0] = 2  # mislabel the excluded pixel
        assert float(cross_entropy_masked(logits, labels2, mask)) == pytest.approx(base)

    def test_ce_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy_masked(
                torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 2, dtype=torch.long),
                torch.zeros(1, 2, 2, dtype=torch.bool),
            )

    def test_mse_cases(self):
        mask = torch.ones(1, 2, 2, dtype=torch.bool)
        pred = torch.full((1, 1, 2, 2), 3.0)
        target = torch.full((1, 2, 2), 1.0)
        assert float(mse_masked(pred, target, mask)) == pytest.approx(4.0)
        assert float(mse_masked(pred, pred.squeeze(1), mask)) == 0.0

    def test_mse_half_mask(self):
        pred = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        target = torch.zeros(1, 2, 2)
        mask = torch.tensor([[[True, True], [False, False]]])
        assert float(mse_masked(pred, target, mask)) == pytest.approx((1 + 4) / 2)


class TestAdam:
    def test_zero_grad_no_update(self):
        p = torch.randn(4, requires_grad=True)
        p.grad = torch.zeros(4)
        before = p.detach().clone()
        adam_step([("p", p)], AdamState(), lr=0.01)
        torch.testing.assert_close(p.detach(), before)

    def test_first_step_is_signed_lr(self):
        p = torch.zeros(3, requires_grad=True)
        p.grad = torch.tensor([10.0, -5.0, 2.0])
        adam_step([("p", p)], AdamState(), lr=0.001)
        torch.testing.assert_close(
            p.detach(), -0.001 * torch.sign(p.grad), atol=1e-6, rtol=1e-4
        )

    def test_deterministic(self):
        def run():
            torch.manual_seed(3)
            p = torch.randn(5, requires_grad=True)
            st = AdamState()
            for _ in range(4):
                p.grad = p.detach() * 0.5 + 1.0
                adam_step([("p", p)], st, lr=0.01)
            return p.detach().clone()

        torch.testing.assert_close(run(), run())

    def test_frozen_names_skipped(self):
        p = torch.zeros(2, requires_grad=True)
        q = torch.zeros(2, requires_grad=True)
        p.grad = torch.ones(2)
        q.grad = torch.ones(2)
        adam_step([("p", p), ("q", q)], AdamState(), lr=0.01, trainable={"q"})
        assert torch.all(p.detach() == 0)
        assert torch.all(q.detach() != 0)


class TestGradCheck:
    def test_clp_model_gradients(self):
        torch.manual_seed(1)
        m = make_clp_model(8)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 16, 16))
        labels = rng.integers(0, 3, size=(16, 16))
        mask = rng.random((16, 16)) > 0.3
        err = grad_check(m, x, labels, mask, "ce", n_params_sampled=64, seed=2)
        assert err < 1e-4

    def test_property_model_gradients(self):
        torch.manual_seed(2)
        m = make_property_model(8)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(8, 16, 16))
        target = rng.normal(size=(16, 16))
        mask = rng.random((16, 16)) > 0.3
        err = grad_check(m, x, target, mask, "mse", n_params_sampled=64, seed=3)
        assert err < 1e-4

    def test_truncation_order(self):
        torch.manual_seed(3)
        m = make_property_model(4)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 16, 16))
        target = rng.normal(size=(16, 16))
        mask = np.ones((16, 16), dtype=bool)
        e1 = grad_check(m, x, target, mask, "mse", epsilon=1e-3, n_params_sampled=32, seed=5)
        m2 = load_like(m)
        e2 = grad_check(m2, x, target, mask, "mse", epsilon=5e-4, n_params_sampled=32, seed=5)
        assert e2 < max(10 * e1, 1e-6)


def load_like(m):
    # fresh float32 copy with identical weights (grad_check mutates dtype)
    fresh = ResUnet(m.in_channels, m.out_channels)
    fresh.load_state_dict({k: v.float() for k, v in m.state_dict().items()})
    return fresh


class TestWeightsIO:
    def test_round_trip_bit_exact(self, tmp_path):
        torch.manual_seed(4)
        m = make_clp_model(23)
        m.set_input_stats(np.arange(23.0), np.arange(1.0, 24.0))
        m.set_target_stats(2.5, 1.5)
        p1 = tmp_path / "a.itlm"
        p2 = tmp_path / "b.itlm"
        save_weights(m, p1)
        m2 = load_weights(p1)
        save_weights(m2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for (n1, t1), (n2, t2) in zip(
            sorted(m.state_dict().items()), sorted(m2.state_dict().items())
        ):
            assert n1 == n2
            torch.testing.assert_close(t1.float(), t2.float(), atol=0, rtol=0)

    def test_corrupt_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.itlm"
        p.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(WeightsError):
            load_weights(p)

    def test_missing_tensor_named(self, tmp_path):
        import json as _json
        import struct as _struct

        m = make_property_model(4)
        p = tmp_path / "w.itlm"
        save_weights(m, p)
        raw = p.read_bytes()
        (mlen,) = _struct.unpack("<Q", raw[8:16])
        manifest = _json.loads(raw[16 : 16 + mlen])
        dropped = manifest["tensors"][0]["name"]
        manifest["tensors"] = manifest["tensors"][1:]
        mb = _json.dumps(manifest, sort_keys=True).encode()
        p.write_bytes(raw[:8] + _struct.pack("<Q", len(mb)) + mb + raw[16 + mlen :])
        with pytest.raises(WeightsError, match=dropped.replace(".", r"\.")):
            load_weights(p)
