"""Trainer tests: the SGD update rule, freezing, determinism, evaluation,
and the ablation grid. Budgets are kept tiny; the long-run behavior lives in
the acceptance suite."""

import numpy as np
import pytest

from gatedprompt.checkpoint import Checkpoint
from gatedprompt.data import generate_depth_selective
from gatedprompt.errors import ConfigError, StateError, TrainingAbort
from gatedprompt.prompts import assert_frozen
from gatedprompt.tensor import Tensor
from gatedprompt.training import (
    LR_GRID,
    RunMetrics,
    TrainConfig,
    ablation_csv,
    build_initial_checkpoint,
    evaluate,
    init_backbone_checkpoint,
    run_ablation,
    sgd_step,
    train,
)
from gatedprompt.vit import ViTConfig

CFG = ViTConfig(image_size=16, channels=3, patch_size=8, embed_dim=16,
                num_blocks=3, num_heads=2, mlp_ratio=2, num_classes=4)


def small_dataset(seed=0, n=40):
    return generate_depth_selective(seed=seed, n=n, num_classes=4, depth=0,
                                    image_size=16, channels=3, patch_size=8)


def quick_cfg(**kw):
    base = dict(mode="gated", lr=0.25, momentum=0.9, batch_size=20, epochs=3,
                seed=1, n_prompts=2, eval_cadence=2)
    base.update(kw)
    return TrainConfig(**base)


class TestSgdStep:
    def test_plain_update(self):
        p = {"w": Tensor(1.0, requires_grad=True)}
        p["w"].grad = np.asarray(0.5)
        out = sgd_step(p, {"w"}, lr=1.0, momentum=0.0, velocity={})
        assert out["w"].item() == 0.5

    def test_unmasked_parameter_untouched(self):
        w = Tensor(1.0, requires_grad=True)
        w.grad = np.asarray(123.0)
        frozen = Tensor(2.0)
        out = sgd_step({"w": w, "f": frozen}, {"w"}, lr=0.1, momentum=0.0, velocity={})
        assert out["f"] is frozen

    def test_two_momentum_steps_hand_iterated(self):
        """Constant gradient 1, momentum 0.9, lr 0.1: p goes 0, -0.1, -0.29."""
        velocity = {}
        p = {"w": Tensor(0.0, requires_grad=True)}
        for expected in (-0.1, -0.29):
            p["w"].grad = np.asarray(1.0)
            p = sgd_step(p, {"w"}, lr=0.1, momentum=0.9, velocity=velocity)
            assert p["w"].item() == pytest.approx(expected, abs=1e-15)

    def test_missing_grad_is_state_error(self):
        p = {"w": Tensor(1.0, requires_grad=True)}
        with pytest.raises(StateError, match="'w'"):
            sgd_step(p, {"w"}, lr=0.1, momentum=0.0, velocity={})


class TestTrainLoop:
    def test_zero_epochs_returns_initialization(self):
        ds = small_dataset()
        cfg = quick_cfg(epochs=0)
        init = build_initial_checkpoint(CFG, cfg)
        tuned, metrics = train(CFG, cfg, ds)
        for name in init.params:
            assert tuned.params[name].data.tobytes() == init.params[name].data.tobytes()
        assert metrics.train_losses == []

    def test_deterministic_metrics_and_checkpoint(self):
        ds = small_dataset()
        cfg = quick_cfg()
        t1, m1 = train(CFG, cfg, ds)
        t2, m2 = train(CFG, cfg, ds)
        assert m1.to_csv() == m2.to_csv()
        assert m1.train_losses == m2.train_losses
        for name in t1.params:
            assert t1.params[name].data.tobytes() == t2.params[name].data.tobytes()

    def test_backbone_frozen_prompts_changed(self):
        """After a few steps the mask splits exactly: frozen bit-identical,
        trainable parameters all moved."""
        ds = small_dataset()
        cfg = quick_cfg(epochs=5)
        init = build_initial_checkpoint(CFG, cfg)
        tuned, _ = train(CFG, cfg, ds)
        report = assert_frozen(init, tuned, init.trainable)
        assert report.ok
        for name in sorted(init.trainable):
            assert tuned.params[name].data.tobytes() != init.params[name].data.tobytes(), name

    def test_first_batch_loss_matches_independent_forward(self):
        from gatedprompt.tensor import cross_entropy
        from gatedprompt.training import forward_logits

        ds = small_dataset()
        cfg = quick_cfg(epochs=1)
        tuned, metrics = train(CFG, cfg, ds)

        init = build_initial_checkpoint(CFG, cfg)
        order = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0]) \
            .permutation(len(ds))
        idx = order[:cfg.batch_size]
        logits = forward_logits(init.params, CFG, cfg, Tensor(ds.images[idx]))
        expected = cross_entropy(logits, ds.labels[idx]).item()
        assert metrics.first_batch_loss == expected

    def test_hard_gate_training_deterministic(self):
        ds = small_dataset()
        cfg = quick_cfg(gate_variant="hard", epochs=2)
        t1, m1 = train(CFG, cfg, ds)
        t2, m2 = train(CFG, cfg, ds)
        assert m1.train_losses == m2.train_losses
        name = "prompt.tokens"
        assert t1.params[name].data.tobytes() == t2.params[name].data.tobytes()

    def test_nan_loss_aborts_with_step(self):
        """A divergent run reports the epoch and step instead of limping on."""
        ds = small_dataset()
        cfg = quick_cfg(lr=1e9, momentum=0.99, epochs=50, eval_cadence=50)
        with pytest.raises(TrainingAbort, match=r"epoch \d+, step \d+"):
            train(CFG, cfg, ds)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train(CFG, quick_cfg(), None)


class TestEvaluate:
    def test_random_head_near_chance(self):
        """Untrained checkpoint on label-uncorrelated inputs scores about 1/C,
        within the binomial bound at n=500."""
        ds = generate_depth_selective(seed=9, n=500, num_classes=4, depth=0,
                                      image_size=16, channels=3, patch_size=8,
                                      noise=25.0)
        ckpt = build_initial_checkpoint(CFG, quick_cfg())
        acc, loss = evaluate(ckpt, ds)
        assert abs(acc - 0.25) <= 0.1
        assert np.isfinite(loss)

    def test_evaluate_twice_identical(self):
        ds = small_dataset()
        ckpt = build_initial_checkpoint(CFG, quick_cfg())
        assert evaluate(ckpt, ds) == evaluate(ckpt, ds)

    def test_evaluate_mutates_nothing(self):
        ds = small_dataset()
        ckpt = build_initial_checkpoint(CFG, quick_cfg())
        before = {n: t.data.tobytes() for n, t in ckpt.params.items()}
        evaluate(ckpt, ds)
        assert all(ckpt.params[n].data.tobytes() == b for n, b in before.items())

    def test_empty_rejected(self):
        ckpt = build_initial_checkpoint(CFG, quick_cfg())
        with pytest.raises(ConfigError):
            evaluate(ckpt, None)


class TestRunAblation:
    def test_grid_shape_and_shared_backbone(self):
        ds = small_dataset()
        backbone = init_backbone_checkpoint(CFG, 1)
        cells = run_ablation(CFG, quick_cfg(epochs=1), ds, None,
                             modes=("shallow", "gated"), shaping_options=(False, True),
                             gate_variants=("soft",), backbone=backbone)
        assert len(cells) == 4
        hashes = {c.backbone_hash for c in cells}
        assert len(hashes) == 1

    def test_gated_fixed_one_reproduces_shallow_metrics(self):
        """The degenerate-gate cell and the shallow cell are the same run."""
        ds = small_dataset()
        backbone = init_backbone_checkpoint(CFG, 1)
        base = quick_cfg(epochs=2, with_temps=False)
        _, shallow_metrics = train(CFG, TrainConfig(**{**base.__dict__, "mode": "shallow"}),
                                   ds, backbone=backbone)
        gated_cfg = TrainConfig(**{**base.__dict__, "mode": "gated",
                                   "fixed_gate_value": 1.0})
        _, gated_metrics = train(CFG, gated_cfg, ds, backbone=backbone)
        assert shallow_metrics.train_losses == gated_metrics.train_losses
        assert shallow_metrics.records == gated_metrics.records

    def test_csv_one_row_per_cell_and_rerun_identical(self):
        ds = small_dataset()
        backbone = init_backbone_checkpoint(CFG, 1)

        def make():
            cells = run_ablation(CFG, quick_cfg(epochs=1), ds, None,
                                 modes=("shallow", "gated"), shaping_options=(True,),
                                 gate_variants=("soft",), backbone=backbone)
            return ablation_csv(cells, quick_cfg(epochs=1), fingerprint="fp")

        csv1, csv2 = make(), make()
        assert csv1 == csv2
        rows = [r for r in csv1.strip().splitlines() if not r.startswith("#")]
        assert len(rows) == 1 + 2  # header + cells

    def test_parallel_matches_serial(self):
        ds = small_dataset()
        backbone = init_backbone_checkpoint(CFG, 1)
        kw = dict(modes=("shallow", "gated"), shaping_options=(False,),
                  gate_variants=("soft",), backbone=backbone)
        serial = run_ablation(CFG, quick_cfg(epochs=1), ds, None, max_workers=1, **kw)
        parallel = run_ablation(CFG, quick_cfg(epochs=1), ds, None, max_workers=2, **kw)
        for a, b in zip(serial, parallel):
            assert a.metrics.train_losses == b.metrics.train_losses


class TestConfigValidation:
    def test_lr_grid_documented(self):
        assert LR_GRID == (0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0)
        assert TrainConfig().lr in LR_GRID

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="banana")
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(n_prompts=0)

    def test_metrics_csv_format(self):
        m = RunMetrics()
        m.records.append((2, "train", 0.5, 0.9))
        text = m.to_csv(fingerprint="abc")
        lines = text.splitlines()
        assert lines[0] == "# config_fingerprint=abc"
        assert lines[1] == "epoch,split,loss,accuracy"
        assert lines[2] == "2,train,0.5,0.9"
