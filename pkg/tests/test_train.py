import numpy as np
import pytest
from dataclasses import replace

from kpgan.checkpoint import Checkpoint, CheckpointError
from kpgan.condnet import DiscriminatorSpec, GeneratorSpec
from kpgan.synthdata import Task, build_datasets, make_ring_task
from kpgan.transfer import export_scores
from kpgan.train import (
    EvalPoint,
    GANState,
    IncompatibleCheckpoint,
    MetricRow,
    RunRecord,
    TrainConfig,
    TrainingAborted,
    evaluate,
    finetune,
    init_pretrain_state,
    iterations_to_threshold,
    metric_rows,
    oracle_samples,
    pretrain,
    transfer_train,
)

SMALL_G = GeneratorSpec(latent_dim=4, widths=(16, 16))
SMALL_D = DiscriminatorSpec(widths=(16, 16))


@pytest.fixture(scope="module")
def task():
    return make_ring_task(4, 2, 2.0, 0.15, seed=0, source_budget=200, target_budget=20)


def _cfg(**kw):
    base = dict(iterations=20, batch_size=16, eval_every=10, eval_samples=100)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def small_pretrained(task):
    return pretrain(task, _cfg(phase="pretrain", iterations=30), SMALL_G, SMALL_D)


@pytest.fixture(scope="module")
def small_propagate(task, small_pretrained):
    return transfer_train(small_pretrained.final, task, _cfg(phase="transfer", mode="propagate", seed=3))


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(phase="warmup"), dict(mode="gan"), dict(iterations=-1),
                                    dict(batch_size=0), dict(lr_g=0.0), dict(lambda_s=-1.0),
                                    dict(eval_samples=50), dict(batch_mode="odd")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_ablation_flags_need_propagate(self):
        with pytest.raises(ValueError):
            TrainConfig(phase="transfer", mode="bsa", residuals_enabled=False)


class TestRunRecord:
    def _record(self, values, start=100, step=100):
        rec = RunRecord("r")
        for i, v in enumerate(values):
            it = start + i * step
            rec.append(EvalPoint(it, [MetricRow("r", it, 8, v, 0.0, 1.0, 1.0)], 0.0, 0.0))
        return rec

    def test_threshold_example(self):
        assert iterations_to_threshold(self._record([0.5, 0.09]), "frechet", 0.1) == 200

    def test_threshold_never_reached(self):
        assert iterations_to_threshold(self._record([0.5, 0.09]), "frechet", 1e-9) is None

    def test_threshold_scan_oracle(self):
        values = list(np.geomspace(3.0, 0.01, 30))
        rec = self._record(values, start=25, step=25)
        for tau in (2.0, 0.5, 0.15, 0.0101, 0.001):
            expected = next((25 + 25 * i for i, v in enumerate(values) if v <= tau), None)
            assert iterations_to_threshold(rec, "frechet", tau) == expected

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            iterations_to_threshold(self._record([0.1]), "fid", 0.1)

    def test_empty_record(self):
        with pytest.raises(ValueError):
            iterations_to_threshold(RunRecord("r"), "frechet", 0.1)

    def test_strictly_increasing(self):
        rec = self._record([0.5])
        with pytest.raises(ValueError):
            rec.append(EvalPoint(100, [], 0.0, 0.0))

    def test_csv_roundtrip(self, tmp_path):
        rec = self._record([0.5, 0.25, 1 / 3])
        rec.to_csv(tmp_path / "r.csv")
        back = RunRecord.from_csv(tmp_path / "r.csv")
        assert back.curve("frechet") == rec.curve("frechet")
        back.to_csv(tmp_path / "r2.csv")
        assert (tmp_path / "r.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()


class TestPretrain:
    def test_zero_iterations_returns_initial(self, task):
        cfg = _cfg(phase="pretrain", iterations=0)
        result = pretrain(task, cfg, SMALL_G, SMALL_D)
        assert result.record.points == []
        assert result.final.to_bytes() == init_pretrain_state(task, cfg, SMALL_G, SMALL_D).to_checkpoint().to_bytes()

    def test_same_seed_byte_identical(self, task, small_pretrained):
        again = pretrain(task, _cfg(phase="pretrain", iterations=30), SMALL_G, SMALL_D)
        assert again.final.to_bytes() == small_pretrained.final.to_bytes()
        assert again.best.to_bytes() == small_pretrained.best.to_bytes()

    def test_different_seed_differs(self, task, small_pretrained):
        other = pretrain(task, _cfg(phase="pretrain", iterations=30, seed=1), SMALL_G, SMALL_D)
        assert other.final.to_bytes() != small_pretrained.final.to_bytes()

    def test_record_and_losses_finite(self, small_pretrained):
        rec = small_pretrained.record
        assert [p.iteration for p in rec.points] == [10, 20, 30]
        assert all(np.isfinite([p.d_loss, p.g_loss]).all() for p in rec.points)
        assert all(len(p.rows) == 4 for p in rec.points)

    def test_wrong_phase(self, task):
        with pytest.raises(ValueError):
            pretrain(task, _cfg(phase="transfer"))

    def test_nan_aborts_with_diagnostic(self, task, small_pretrained):
        ckpt = Checkpoint.from_bytes(small_pretrained.final.to_bytes())
        ckpt.tensors["D/psi.w"] = ckpt.tensors["D/psi.w"] * np.nan
        with pytest.raises(TrainingAborted, match=r"step 1: discriminator"):
            transfer_train(ckpt, task, _cfg(phase="transfer", mode="propagate"))


class TestCheckpoint:
    def test_state_roundtrip_byte_identical(self, small_propagate):
        blob = small_propagate.final.to_bytes()
        again = GANState.from_checkpoint(Checkpoint.from_bytes(blob)).to_checkpoint().to_bytes()
        assert again == blob

    def test_file_roundtrip(self, tmp_path, small_pretrained):
        small_pretrained.final.save(tmp_path / "a.ckpt")
        assert Checkpoint.load(tmp_path / "a.ckpt").to_bytes() == small_pretrained.final.to_bytes()

    def test_version_mismatch_rejected(self, small_pretrained):
        blob = bytearray(small_pretrained.final.to_bytes())
        blob[8:12] = (99).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(bytes(blob))

    def test_bad_magic_and_trailing_bytes(self, small_pretrained):
        blob = small_pretrained.final.to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"X" + blob[1:])
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob + b"\0")

    def test_header_contents(self, small_propagate):
        meta = small_propagate.final.meta
        assert meta["mode"] == "propagate" and meta["iteration"] == 20 and meta["seed"] == 3
        assert len(meta["task_fingerprint"]) == 16
        assert "T/scores.gamma.0" in small_propagate.final.tensors

    def test_rng_and_optimizer_state_roundtrip(self, small_pretrained):
        state = GANState.from_checkpoint(small_pretrained.final)
        blob = state.to_checkpoint().to_bytes()
        back = GANState.from_checkpoint(Checkpoint.from_bytes(blob))
        assert back.rng.bit_generator.state == state.rng.bit_generator.state
        assert back.opt_g.t == state.opt_g.t == 30
        assert all(back.opt_d.m[k].tobytes() == state.opt_d.m[k].tobytes() for k in state.opt_d.m)


class TestTransfer:
    def test_fingerprint_mismatch(self, small_pretrained):
        other = make_ring_task(4, 2, 2.5, 0.15, seed=0, source_budget=200, target_budget=20)
        with pytest.raises(IncompatibleCheckpoint):
            transfer_train(small_pretrained.final, other, _cfg(phase="transfer"))

    def test_target_choice_does_not_break_compatibility(self, small_pretrained):
        other = make_ring_task(4, 1, 2.0, 0.15, seed=0, source_budget=200, target_budget=20)
        result = transfer_train(small_pretrained.final, other, _cfg(phase="transfer", iterations=2, eval_every=1))
        assert result.final.meta["num_classes"] == 5

    def test_requires_pretrain_checkpoint(self, task, small_propagate):
        with pytest.raises(IncompatibleCheckpoint):
            transfer_train(small_propagate.final, task, _cfg(phase="transfer"))

    @pytest.mark.parametrize("mode", ["propagate", "bsa"])
    def test_old_classes_bitwise_preserved(self, task, small_pretrained, mode):
        result = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", mode=mode))
        before = GANState.from_checkpoint(small_pretrained.final).generate(range(4), 100, seed=11)
        after = GANState.from_checkpoint(result.final).generate(range(4), 100, seed=11)
        assert all(before[c].tobytes() == after[c].tobytes() for c in range(4))

    def test_transfergan_changes_old_classes(self, task, small_pretrained):
        result = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", mode="transfergan"))
        before = GANState.from_checkpoint(small_pretrained.final).generate([0], 100, seed=11)
        after = GANState.from_checkpoint(result.final).generate([0], 100, seed=11)
        assert before[0].tobytes() != after[0].tobytes()

    def test_scratch_has_all_classes(self, task, small_pretrained):
        result = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", mode="scratch"))
        assert result.final.tensors["G/cbn0.gamma"].shape[0] == 6

    def test_frozen_prior_no_res_trains_only_scores(self, task, small_pretrained):
        cfg = _cfg(phase="transfer", prior_tunable=False, residuals_enabled=False)
        result = transfer_train(small_pretrained.final, task, cfg)
        before, after = small_pretrained.final.tensors, result.final.tensors
        for name in before:
            if name.startswith("G/"):
                assert before[name].tobytes() == after[name].tobytes(), name
        initial = GANState.from_checkpoint(
            transfer_train(small_pretrained.final, task, replace(cfg, iterations=0)).final).to_checkpoint().tensors
        changed = {k for k in after if k.startswith("T/") and after[k].tobytes() != initial[k].tobytes()}
        assert changed == {f"T/scores.{p}.{l}" for p in ("gamma", "beta") for l in range(2)}

    def test_transfer_deterministic(self, task, small_pretrained, small_propagate):
        again = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", mode="propagate", seed=3))
        assert again.final.to_bytes() == small_propagate.final.to_bytes()

    def test_explicit_target_data(self, task, small_pretrained):
        _, tgt = build_datasets(task)
        a = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", iterations=3, eval_every=3), tgt)
        b = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", iterations=3, eval_every=3))
        assert a.final.to_bytes() == b.final.to_bytes()


class TestFinetune:
    def test_zero_iterations_is_identity(self, task, small_propagate):
        result = finetune(small_propagate.final, task, _cfg(phase="finetune", iterations=0))
        assert result.final.to_bytes() == small_propagate.final.to_bytes()

    def test_scores_frozen(self, task, small_propagate):
        result = finetune(small_propagate.final, task, _cfg(phase="finetune"))
        block_in = GANState.from_checkpoint(small_propagate.final).block
        block_out = GANState.from_checkpoint(result.final).block
        assert export_scores(block_in, 4) == export_scores(block_out, 4)
        for l in range(2):
            assert block_in.prior.gamma_hat[l].data.tobytes() == block_out.prior.gamma_hat[l].data.tobytes()
            assert block_in.residuals.r_gamma[l].data.tobytes() != block_out.residuals.r_gamma[l].data.tobytes()
        assert result.final.tensors["G/fc0.w"].tobytes() != small_propagate.final.tensors["G/fc0.w"].tobytes()

    def test_wrong_provenance(self, task, small_pretrained):
        bsa = transfer_train(small_pretrained.final, task, _cfg(phase="transfer", mode="bsa", iterations=1))
        with pytest.raises(IncompatibleCheckpoint):
            finetune(bsa.final, task, _cfg(phase="finetune"))


class TestEvaluate:
    def test_oracle_floor(self, default_task):
        classes = range(10)
        rows = metric_rows(oracle_samples(default_task, classes, 2000, 5), default_task, 2000, 5)
        assert max(r.frechet for r in rows) < 0.01
        assert max(r.kmmd for r in rows) < 0.02

    def test_deterministic(self, task, small_pretrained):
        a = evaluate(small_pretrained.final, task, 200, seed=4)
        b = evaluate(small_pretrained.final, task, 200, seed=4)
        assert a == b and len(a) == 4

    def test_untrained_far_above_floor(self, task):
        cfg = _cfg(phase="pretrain", iterations=0)
        init = pretrain(task, cfg, SMALL_G, SMALL_D).final
        floor = metric_rows(oracle_samples(task, range(4), 500, 9), task, 500, 9)
        rows = evaluate(init, task, 500, seed=9)
        assert min(r.frechet for r in rows) >= 10 * max(r.frechet for r in floor)

    def test_absent_class(self, task, small_pretrained):
        with pytest.raises(ValueError):
            evaluate(small_pretrained.final, task, 200, classes=[4])

    def test_too_few_samples(self, task, small_pretrained):
        with pytest.raises(ValueError):
            evaluate(small_pretrained.final, task, 50)


@pytest.mark.slow
class TestDefaultScale:
    def test_pretrain_quality(self, pretrained_default, default_task):
        rows = evaluate(pretrained_default.final, default_task, 500)
        assert np.mean([r.frechet for r in rows]) < 0.1
        assert all(r.coverage == 1.0 for r in rows)

    def test_identity_diagnostic_task(self, pretrained_default, default_task):
        k = 3
        cfg = replace(default_task.config, num_target=1)
        diag = Task(cfg, default_task.sources, (default_task.sources[k],), (k,))
        result = transfer_train(pretrained_default.final, diag,
                                TrainConfig(phase="transfer", iterations=1000, eval_every=100))
        rows = evaluate(result.final, diag, 500, classes=[8])
        assert rows[0].frechet < 0.1

    def test_finetune_does_not_hurt(self, runs, default_task):
        from conftest import ACCEPTANCE_SEEDS
        before, after = [], []
        for seed in ACCEPTANCE_SEEDS:
            source = runs.transfer("default", "propagate", seed).final
            tuned = runs.finetune(seed).final
            before.append(np.mean([r.frechet for r in evaluate(source, default_task, 500, classes=[8, 9])]))
            after.append(np.mean([r.frechet for r in evaluate(tuned, default_task, 500, classes=[8, 9])]))
        assert np.median(after) <= np.median(before), (before, after)
