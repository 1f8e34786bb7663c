import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from cmil.bench import (BagPrediction, MetricsMatrix, TrainingDiverged, desk_config, finalize_metrics,
                        preset, run_sequence, score_predictions, set_scores,
                        trainable_parameters, write_run)
from cmil.synth import build_sequence

from oracles import summaries_match


def _matrix(inst, n_tasks=None):
    inst = np.asarray(inst, dtype=float)
    R = MetricsMatrix(inst.shape[0], n_tasks or inst.shape[1])
    for m in R.values:
        R.values[m][:] = inst
    return R


def _pred(label, predicted, truth, guess, masked=None):
    return BagPrediction(1, label, predicted, predicted if masked is None else masked,
                         np.asarray(truth), np.asarray(guess))


class TestMetricFormulas:
    def test_set_scores_hand_example(self):
        iou, dice = set_scores(np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0]))
        assert iou == pytest.approx(1 / 3) and dice == pytest.approx(1 / 2)

    def test_perfect_predictions(self):
        preds = [_pred(1, 1, [0, 1, 1], [0, 1, 1]), _pred(0, 0, [0, 0, 0], [0, 0, 0])]
        s = score_predictions(preds)
        assert s == {"bag": 1.0, "mbag": 1.0, "inst": 1.0, "inst_pos": 1.0, "iou": 1.0, "dice": 1.0}

    def test_inst_accuracy_is_micro_averaged(self):
        preds = [_pred(1, 1, [1, 0], [1, 1]), _pred(0, 0, [0] * 8, [0] * 8)]
        assert score_predictions(preds)["inst"] == pytest.approx(9 / 10)

    def test_iou_skips_negative_bags(self):
        preds = [_pred(1, 1, [1, 1, 0, 0], [0, 1, 1, 0]), _pred(0, 0, [0, 0], [1, 1])]
        assert score_predictions(preds)["iou"] == pytest.approx(1 / 3)

    def test_forgetting_hand_example(self):
        R = _matrix([[0.9, np.nan], [0.7, 0.8]])
        out = finalize_metrics(R)
        assert out["acc_inst"] == pytest.approx(0.75, abs=1e-15)
        assert out["forget_inst"] == pytest.approx(0.2, abs=1e-15)

    def test_no_forgetting(self):
        out = finalize_metrics(_matrix([[0.6, np.nan, np.nan], [0.6, 0.7, np.nan], [0.6, 0.7, 0.9]]))
        assert out["forget_inst"] == 0 and out["forget_bag"] == 0

    def test_single_task_has_no_forgetting(self):
        out = finalize_metrics(_matrix([[0.8]]))
        assert out["forget_inst"] is None and out["acc_inst"] == 0.8

    def test_incomplete_matrix_rejected(self):
        with pytest.raises(ValueError, match="incomplete"):
            finalize_metrics(_matrix([[0.9, np.nan], [np.nan, 0.8]]))

    def test_out_of_range_score_rejected(self):
        R = MetricsMatrix(1, 1)
        with pytest.raises(ValueError):
            R.record(0, 0, dict(bag=1.2, mbag=1, inst=1, inst_pos=1, iou=1, dice=1))

    def test_csv_round_trip(self):
        R = _matrix([[0.9, np.nan], [0.7, 0.8]])
        back = MetricsMatrix.from_csv(R.to_csv())
        for m in R.values:
            np.testing.assert_array_equal(back.values[m], R.values[m])

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            score_predictions([])


class TestPresets:
    def test_table(self):
        base = desk_config()
        assert not preset("finetune", base).train.use_owlora
        assert preset("joint", base).joint and not preset("joint_no_bppl", base).train.use_bppl
        assert not preset("no_projection", base).train.projection_on
        assert preset("no_lin", base).train.lambda3 == 0
        with pytest.raises(KeyError):
            preset("nope", base)

    def test_trainable_parameters_after_first_task(self, tiny_config):
        data = build_sequence(2, 10, 0, tiny_config.synth)
        res = run_sequence(tiny_config, datasets=data)
        params = trainable_parameters(res.model, 2, tiny_config.train, data[1].classes)
        names = {id(p): n for n, p in res.model.named_parameters()}
        chosen = {names[id(p)] for p in params}
        assert all(n.endswith((".U", ".S", ".V")) or n.startswith(("classifier", "attn_score")) for n in chosen)
        assert not any(n.endswith(".frozen_sum") for n in chosen)


class TestRuns:
    def test_small_run_metrics_match_brute_force(self, tiny_config):
        res = run_sequence(tiny_config)
        ok, detail = summaries_match(res)
        assert ok, detail
        assert res.summary["macc_bag"] >= res.summary["acc_bag"]
        assert set(res.ranks) and all(r >= 1 for r in res.ranks.values())

    def test_losses_decrease_on_one_task(self):
        base = desk_config(0, num_tasks=1)
        cfg = replace(base, bags_per_task=20, train=replace(base.train, epochs=8))
        logs = run_sequence(cfg).logs
        assert logs[-1].bag_loss < logs[0].bag_loss

    def test_deterministic(self, tiny_config):
        a, b = run_sequence(tiny_config), run_sequence(tiny_config)
        assert a.metrics.to_csv() == b.metrics.to_csv()
        for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert torch.equal(p, q), n

    def test_resume_is_bit_exact(self, tiny_config, tmp_path):
        cfg = replace(tiny_config, num_tasks=3)
        data = build_sequence(3, cfg.bags_per_task, cfg.data_seed, cfg.synth)
        full = run_sequence(cfg, datasets=data, checkpoint_dir=tmp_path)
        resumed = run_sequence(cfg, datasets=data, resume_from=tmp_path / "task2")
        assert resumed.metrics.to_csv() == full.metrics.to_csv()
        back = dict(resumed.model.named_parameters())
        assert set(back) == {n for n, _ in full.model.named_parameters()}
        for n, p in full.model.named_parameters():
            assert torch.equal(p, back[n]), n

    def test_single_task_sequence_equals_joint(self, tiny_config):
        cfg = replace(tiny_config, num_tasks=1)
        data = build_sequence(1, cfg.bags_per_task, cfg.data_seed, cfg.synth)
        seq = run_sequence(preset("finetune", cfg), datasets=data)
        joint = run_sequence(preset("joint", cfg), datasets=data)
        assert seq.metrics.to_csv() == joint.metrics.to_csv()

    def test_finetune_equals_toggles(self, tiny_config):
        """Projection off, lambda3 = 0 and no adapters is the finetune path."""
        data = build_sequence(2, 10, 0, tiny_config.synth)
        toggled = replace(tiny_config, train=replace(tiny_config.train, projection_on=False,
                                                     lambda3=0.0, use_owlora=False))
        a = run_sequence(toggled, datasets=data)
        b = run_sequence(preset("finetune", tiny_config), datasets=data)
        assert a.metrics.to_csv() == b.metrics.to_csv()

    def test_divergence_reports_last_checkpoint(self, tiny_config, tmp_path):
        data = build_sequence(2, 10, 0, tiny_config.synth)
        data[1].train[0].instances = np.full_like(data[1].train[0].instances, np.nan)
        with pytest.raises(TrainingDiverged) as err:
            run_sequence(tiny_config, datasets=data, checkpoint_dir=tmp_path)
        assert err.value.last_good is not None and err.value.last_good.name == "task1"

    def test_joint_metrics_have_one_stage(self, tiny_config):
        res = run_sequence(preset("joint", tiny_config))
        assert res.metrics.num_stages == 1 and res.summary["forget_inst"] is None


class TestWriteRun:
    def test_artifacts(self, tiny_config, tmp_path):
        res = run_sequence(tiny_config)
        out = write_run(res, tmp_path / "run", extra={"note": "x"})
        names = {p.name for p in out.iterdir()}
        assert {"metrics.csv", "summary.json", "train_log.csv", "manifest.json"} <= names
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["note"] == "x" and len(manifest["metrics_hash"]) == 40
        summary = json.loads((out / "summary.json").read_text())
        assert summary["acc_inst"] == pytest.approx(res.summary["acc_inst"])
        assert MetricsMatrix.from_csv((out / "metrics.csv").read_text()).to_csv() == res.metrics.to_csv()
