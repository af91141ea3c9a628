"""Two-stage training: sample building, freeze policies, stage separation,
model chaining, and full-scene inference."""

import numpy as np
import pytest
import torch

from itlm import model as nnm
from itlm import scenegen
from itlm.grids import make_grid
from itlm.scenegen import DatasetParams, gen_dataset
from itlm.training import (
    FREEZE_ALL_BUT_HEAD,
    FREEZE_ENCODER,
    FREEZE_NONE,
    ModelSuite,
    SuiteConfig,
    TrainConfig,
    apply_freeze,
    build_samples,
    finetune,
    finetune_suite,
    predict_scene,
    pretrain,
    train_suite,
)

GRID = make_grid(40.0, 100.0, 0.05, 0.05, 64, 64)


@pytest.fixture(scope="module")
def dataset():
    return gen_dataset(seed=7, n_scenes=2, grid=GRID, params=DatasetParams())


def _cfg(**kw):
    base = dict(lr=0.003, epochs=2, batch_size=4, seed=0, tile_size=32,
                min_labeled_fraction=0.05)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)

    def test_fraction_range(self):
        with pytest.raises(ValueError):
            TrainConfig(min_labeled_fraction=0.0)

    def test_freeze_policy_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(freeze_policy="decoder")


class TestBuildSamples:
    def test_disjoint_tiles_and_shapes(self, dataset):
        cfg = _cfg(min_labeled_fraction=0.001)
        batch = build_samples(dataset, "source", "clp", cfg)
        # 64x64 scenes with 32px disjoint tiles -> at most 4 per scene
        assert 0 < len(batch.x) <= 8
        assert batch.x.shape[1:] == (scenegen.N_CHANNELS_BASE, 32, 32)
        assert batch.y.shape[1:] == (32, 32)
        assert batch.mask.dtype == bool

    def test_labeled_fraction_filter(self, dataset):
        lo = build_samples(dataset, "target", "clp", _cfg(min_labeled_fraction=0.001))
        hi = build_samples(dataset, "target", "clp", _cfg(min_labeled_fraction=0.9))
        assert len(hi.x) <= len(lo.x)
        for m in lo.mask:
            assert m.mean() >= 0.001

    def test_shuffle_deterministic(self, dataset):
        a = build_samples(dataset, "source", "cth", _cfg(seed=3))
        b = build_samples(dataset, "source", "cth", _cfg(seed=3))
        c = build_samples(dataset, "source", "cth", _cfg(seed=4))
        assert np.array_equal(a.x, b.x)
        assert not np.array_equal(a.x, c.x) or len(a.x) <= 1

    def test_clp_channel_appended(self, dataset):
        chans = {s.index: (s.truth.clp.values / 2.0).astype(np.float32) for s in dataset}
        batch = build_samples(dataset, "source", "cth", _cfg(), clp_channels=chans)
        assert batch.x.shape[1] == scenegen.N_CHANNELS_BASE + 1
        assert set(np.unique(batch.x[:, -1])) <= {0.0, 0.5, 1.0}

    def test_cot_trained_in_log(self, dataset):
        batch = build_samples(dataset, "source", "cot", _cfg(log_cot=True))
        vals = batch.y[batch.mask]
        # log10 of biased COT (truth [0.1, 150] scaled by 1.20)
        assert vals.min() >= np.log10(0.1 * 0.8) - 1e-6
        assert vals.max() <= np.log10(150 * 1.2) + 1e-6

    def test_empty_dataset_raises(self):
        with pytest.raises(ValueError):
            build_samples([], "source", "clp", _cfg())


class TestFreezePolicies:
    def setup_method(self):
        torch.manual_seed(0)
        self.model = nnm.make_clp_model(scenegen.N_CHANNELS_BASE)
        self.all_names = {n for n, _ in self.model.named_parameters()}

    def test_none_trains_everything(self):
        assert apply_freeze(self.model, FREEZE_NONE) == self.all_names

    def test_encoder_frozen(self):
        trainable = apply_freeze(self.model, FREEZE_ENCODER)
        frozen = self.all_names - trainable
        assert frozen and all(
            n.startswith(("stem.", "enc_blocks.", "downs.")) for n in frozen
        )
        assert any(n.startswith("dec_blocks.") for n in trainable)
        assert any(n.startswith("head.") for n in trainable)

    def test_all_but_head(self):
        trainable = apply_freeze(self.model, FREEZE_ALL_BUT_HEAD)
        assert trainable and all(n.startswith("head.") for n in trainable)


class TestStages:
    def test_pretrain_reduces_loss_and_sets_stats(self, dataset):
        torch.manual_seed(1)
        model = nnm.make_clp_model(scenegen.N_CHANNELS_BASE)
        cfg = _cfg(loss="ce", epochs=4)
        batch = build_samples(dataset, "source", "clp", cfg)
        curve = pretrain(model, batch, cfg)
        assert len(curve) == 4
        assert curve[-1] < curve[0]
        assert float(model.input_std.min()) > 0

    def test_finetune_respects_encoder_freeze(self, dataset):
        torch.manual_seed(2)
        model = nnm.make_clp_model(scenegen.N_CHANNELS_BASE)
        cfg = _cfg(loss="ce", freeze_policy=FREEZE_ENCODER)
        src = build_samples(dataset, "source", "clp", cfg)
        pretrain(model, src, cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        bn_before = {n: b.detach().clone() for n, b in model.named_buffers()}
        tgt = build_samples(dataset, "target", "clp", cfg)
        finetune(model, tgt, cfg)
        changed_any = False
        for n, p in model.named_parameters():
            same = torch.equal(before[n], p.detach())
            if n.startswith(("stem.", "enc_blocks.", "downs.")):
                assert same, f"frozen parameter {n} changed"
            elif not same:
                changed_any = True
        assert changed_any
        # frozen batch-norm running stats must not drift either
        for n, b in model.named_buffers():
            if n.startswith(("stem.", "enc_blocks.", "downs.")) and "running" in n:
                assert torch.equal(bn_before[n], b.detach()), n

    def test_finetune_keeps_normalization(self, dataset):
        torch.manual_seed(3)
        model = nnm.make_property_model(scenegen.N_CHANNELS_BASE + 1)
        cfg = _cfg(loss="mse")
        chans = {s.index: (s.truth.clp.values / 2.0).astype(np.float32) for s in dataset}
        src = build_samples(dataset, "source", "cth", cfg, chans)
        pretrain(model, src, cfg)
        mean = model.input_mean.clone()
        tmean = float(model.target_mean)
        tgt = build_samples(dataset, "target", "cth", cfg, chans)
        finetune(model, tgt, cfg)
        assert torch.equal(mean, model.input_mean)
        assert float(model.target_mean) == tmean


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = SuiteConfig(
        clp=_cfg(loss="ce"),
        cth=_cfg(loss="mse"),
        cer=_cfg(loss="mse"),
        cot=_cfg(loss="mse"),
        infer_stride=32,
    )
    torch.manual_seed(0)
    suite, curves = train_suite(dataset, cfg, stage="both")
    return suite, curves, cfg


class TestSuite:
    def test_curves_cover_both_stages(self, trained):
        _, curves, _ = trained
        for var in ("clp", "cth", "cer", "cot"):
            assert f"{var}_pretrain" in curves
            assert f"{var}_finetune" in curves

    def test_property_models_chained_to_24_channels(self, trained):
        suite, _, _ = trained
        assert suite.clp.in_channels == scenegen.N_CHANNELS_BASE
        for var in ("cth", "cer", "cot"):
            assert getattr(suite, var).in_channels == scenegen.N_CHANNELS_BASE + 1

    def test_pretrain_stage_only(self, dataset):
        cfg = SuiteConfig(clp=_cfg(loss="ce", epochs=1), cth=_cfg(loss="mse", epochs=1),
                          cer=_cfg(loss="mse", epochs=1), cot=_cfg(loss="mse", epochs=1),
                          infer_stride=32)
        torch.manual_seed(0)
        _, curves = train_suite(dataset, cfg, stage="pretrain")
        assert "clp_pretrain" in curves and "clp_finetune" not in curves

    def test_finetune_suite_separately(self, dataset):
        cfg = SuiteConfig(clp=_cfg(loss="ce", epochs=1), cth=_cfg(loss="mse", epochs=1),
                          cer=_cfg(loss="mse", epochs=1), cot=_cfg(loss="mse", epochs=1),
                          infer_stride=32)
        torch.manual_seed(0)
        suite, _ = train_suite(dataset, cfg, stage="pretrain")
        curves = finetune_suite(suite, dataset, cfg)
        assert set(curves) == {"clp_finetune", "cth_finetune", "cer_finetune", "cot_finetune"}


class TestPredictScene:
    def test_output_contract(self, trained, dataset):
        suite, _, cfg = trained
        scene = dataset[0]
        labels, elapsed = predict_scene(suite, scene.stack, stride=cfg.infer_stride)
        assert elapsed > 0
        assert labels.clp.values.shape == GRID.shape
        assert set(np.unique(labels.clp.values)) <= {0.0, 1.0, 2.0}
        cloudy = labels.clp.values != scenegen.CLP_CLEAR
        assert np.array_equal(labels.cth.valid, cloudy)
        assert np.all(labels.cot.values[cloudy] > 0)  # COT back from log space

    def test_rejects_wrong_channel_count(self, trained, dataset):
        suite, _, _ = trained
        stack = dataset[0].stack
        bad = scenegen.SceneStack(
            grid=stack.grid,
            channels=list(stack.channels) + [stack.channels[0]],
            names=list(stack.names) + ["extra"],
        )
        with pytest.raises(ValueError):
            predict_scene(suite, bad)

    def test_clp_channel_perturbation_changes_properties(self, trained, dataset):
        from itlm.training import _predict_full, _encode_clp_channel, predict_clp_full

        suite, _, cfg = trained
        arr = dataset[0].stack.to_array()
        clp = predict_clp_full(suite.clp, arr, cfg.infer_stride, cfg.blend)
        arr24 = np.concatenate([arr, _encode_clp_channel(clp)[None]], axis=0)
        out_a = _predict_full(suite.cth, arr24, cfg.infer_stride, cfg.blend, softmax=False)
        flipped = arr24.copy()
        flipped[-1] = 1.0 - flipped[-1]
        out_b = _predict_full(suite.cth, flipped, cfg.infer_stride, cfg.blend, softmax=False)
        assert np.any(out_a != out_b)
