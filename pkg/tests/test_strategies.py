import numpy as np
import pytest

from seraug import corpus, model_core as mc, strategies as st
from seraug.errors import DataError
from seraug.utils import derive_np_rng, derive_rng


def make_item(i, label_idx=0, domain_idx=0, duration=1.0, dims=6, frames=4, seed=None):
    rng = np.random.default_rng(derive_np_rng("item", seed if seed is not None else i).integers(2**31))
    x = rng.normal(size=(1, frames, dims))
    x[:, :, label_idx] += 4.0
    return corpus.Item(
        id=f"item-{i:03d}", x=x, label_idx=label_idx, domain_idx=domain_idx,
        duration_s=duration,
    )


def make_fold(n_train=24, n_val=8, n_test=8, dims=6):
    def batch(n, offset):
        return [make_item(offset + i, label_idx=i % 4, dims=dims) for i in range(n)]

    return st.FoldData(
        fold_index=1,
        train=batch(n_train, 0),
        val=batch(n_val, 100),
        test=batch(n_test, 200),
    )


def make_synth(n=10, dims=6):
    return [
        make_item(300 + i, label_idx=i % 4, domain_idx=1, duration=0.2 + 0.1 * i, dims=dims)
        for i in range(n)
    ]


def quick_plan(**overrides):
    base = dict(strategy="baseline", epochs=4, batch_size=8, seed=7, hidden=8)
    base.update(overrides)
    return st.TrainPlan(**base)


class TestPlanValidation:
    def test_defaults_valid(self):
        st.TrainPlan().validate()

    def test_zero_epochs_rejected(self):
        with pytest.raises(DataError):
            st.TrainPlan(epochs=0).validate()

    def test_bad_strategy_rejected(self):
        with pytest.raises(DataError):
            st.TrainPlan(strategy="magic").validate()

    def test_curriculum_fit_checked_only_for_curriculum(self):
        st.TrainPlan(strategy="baseline", epochs=5).validate()
        with pytest.raises(DataError):
            st.TrainPlan(strategy="curriculum", epochs=20,
                         curriculum_chunks=5, curriculum_interval=5).validate()

    def test_nonpositive_ratio_rejected_for_augmented(self):
        with pytest.raises(DataError):
            st.TrainPlan(strategy="random_mix", ratio=0.0).validate()


class TestSelectCheckpoint:
    def logs(self, was):
        return [
            st.EpochLog(fold=1, strategy="baseline", epoch=i + 1, train_loss=0.0,
                        val_wa=wa, val_ua=wa, active_synth=0)
            for i, wa in enumerate(was)
        ]

    def test_last_epoch(self):
        assert st.select_checkpoint(self.logs([0.9, 0.5, 0.4]), "last_epoch") == 3

    def test_best_val_ties_to_earliest(self):
        assert st.select_checkpoint(self.logs([0.6, 0.7, 0.7]), "best_val") == 2

    def test_single_epoch_either_policy(self):
        logs = self.logs([0.5])
        assert st.select_checkpoint(logs, "last_epoch") == 1
        assert st.select_checkpoint(logs, "best_val") == 1

    def test_augmented_strategies_force_last_epoch(self):
        plan = quick_plan(strategy="random_mix")
        assert st.effective_checkpoint_policy(plan) == "last_epoch"
        with pytest.warns(UserWarning):
            plan = quick_plan(strategy="curriculum", checkpoint_policy="best_val",
                              epochs=50)
            assert st.effective_checkpoint_policy(plan) == "last_epoch"

    def test_baseline_defaults_to_best_val(self):
        assert st.effective_checkpoint_policy(quick_plan()) == "best_val"


class TestCurriculumSchedule:
    def test_chunk_counts_follow_schedule(self):
        chunks = st.curriculum_chunks(make_synth(10), k=5)
        assert [len(c) for c in chunks] == [2, 2, 2, 2, 2]
        expected = {0: 2, 4: 2, 5: 4, 9: 4, 10: 6, 14: 6, 15: 8, 19: 8, 20: 10, 49: 10}
        for epoch0, count in expected.items():
            assert len(st.active_curriculum_items(chunks, epoch0, interval=5)) == count

    def test_active_count_monotone(self):
        chunks = st.curriculum_chunks(make_synth(13), k=4)
        counts = [len(st.active_curriculum_items(chunks, e, 3)) for e in range(30)]
        assert counts == sorted(counts)
        assert counts[-1] == 13

    def test_chunks_duration_sorted(self):
        items = make_synth(12)
        items.reverse()
        chunks = st.curriculum_chunks(items, k=4)
        for a, b in zip(chunks, chunks[1:]):
            assert max(x.duration_s for x in a) <= min(x.duration_s for x in b)

    def test_duration_ties_break_by_id(self):
        items = [make_item(i, duration=1.0) for i in (3, 1, 2)]
        chunks = st.curriculum_chunks(items, k=3)
        assert [c[0].id for c in chunks] == ["item-001", "item-002", "item-003"]

    def test_all_items_active_by_final_chunk_epoch(self):
        synth = make_synth(10)
        chunks = st.curriculum_chunks(synth, k=5)
        active = st.active_curriculum_items(chunks, (5 - 1) * 5, interval=5)
        assert {it.id for it in active} == {it.id for it in synth}


class TestTrainingRuns:
    def test_baseline_learns_separable_data(self, blob_corpus):
        records, base = blob_corpus
        plan = st.TrainPlan(strategy="baseline", epochs=50, batch_size=16, seed=42)
        trained = st.run_plan(records, base, plan, only_folds=[1])[0]
        assert trained.logs[-1].train_loss < 0.1

    def test_baseline_deterministic_logs(self):
        fold = make_fold()
        a = st.train_baseline(fold, quick_plan(), seed=3)
        b = st.train_baseline(fold, quick_plan(), seed=3)
        assert a.logs == b.logs
        for k, v in a.model.params().items():
            np.testing.assert_array_equal(v, b.model.params()[k])

    def test_baseline_ignores_active_synth(self):
        trained = st.train_baseline(make_fold(), quick_plan(), seed=1)
        assert all(log.active_synth == 0 for log in trained.logs)

    def test_random_mix_epoch_accounting(self):
        fold = make_fold(n_train=24)
        synth = make_synth(12)
        trained = st.train_random_mix(fold, synth, quick_plan(strategy="random_mix"), seed=1)
        assert all(log.active_synth == 12 for log in trained.logs)
        assert trained.selected_epoch == trained.logs[-1].epoch

    def test_random_mix_uses_synthetic_labels(self):
        # with labels in the loss, a synthetic-only class becomes learnable
        fold = make_fold()
        synth = make_synth(12)
        trained = st.train_random_mix(
            fold, synth, quick_plan(strategy="random_mix", epochs=30), seed=1
        )
        cm = st.evaluate(trained.model, synth)
        assert np.trace(cm) > 0

    def test_curriculum_log_schedule(self):
        fold = make_fold()
        synth = make_synth(10)
        plan = quick_plan(strategy="curriculum", epochs=26,
                          curriculum_chunks=5, curriculum_interval=5)
        trained = st.train_curriculum(fold, synth, plan, seed=1)
        counts = [log.active_synth for log in trained.logs]
        assert counts[:5] == [2] * 5
        assert counts[5:10] == [4] * 5
        assert counts[20:] == [10] * 6
        assert counts == sorted(counts)

    def test_transfer_phase_structure(self):
        fold = make_fold()
        synth = make_synth(8)
        plan = quick_plan(strategy="transfer", epochs=3, phase1_epochs=5)
        trained = st.train_transfer(fold, synth, plan, seed=2)
        assert len(trained.logs) == 8
        assert [log.active_synth for log in trained.logs] == [8] * 5 + [0] * 3
        assert trained.selected_epoch == 8

    def test_transfer_phase2_lr_arithmetic(self):
        plan = st.TrainPlan(strategy="transfer")
        assert plan.lr * plan.transfer_lr_factor == pytest.approx(1e-4)

    def test_transfer_phase2_starts_from_phase1_end(self):
        # with phase-2 lr scaled to zero and no decay, the final parameters
        # must be exactly the phase-1 snapshot
        fold = make_fold()
        synth = make_synth(8)
        plan = quick_plan(strategy="transfer", epochs=3, phase1_epochs=4,
                          transfer_lr_factor=0.0, weight_decay=0.0)
        trained = st.train_transfer(fold, synth, plan, seed=2)
        for k, v in trained.model.params().items():
            np.testing.assert_array_equal(v, trained.phase1_model.params()[k])

    def test_transfer_requires_synthetic(self):
        with pytest.raises(DataError):
            st.train_transfer(make_fold(), [], quick_plan(strategy="transfer"), seed=1)

    def test_missing_class_warns_not_errors(self):
        fold = make_fold()
        fold.train = [it for it in fold.train if it.label_idx != 2]
        with pytest.warns(UserWarning, match="angry"):
            st.train_baseline(fold, quick_plan(epochs=1), seed=1)


class TestAdversarial:
    def setup_batch(self, seed=5):
        rng = derive_np_rng("adv", seed)
        model = mc.SerModel.init(rng, in_dim=6, hidden=8, n_classes=4, n_layers=None)
        head = mc.DomainHead.init(rng, hidden=8)
        batch = [make_item(i, label_idx=i % 4, domain_idx=i % 2) for i in range(8)]
        opts = [mc.AdamW(), mc.AdamW(), mc.AdamW()]
        return model, head, batch, opts

    def test_step2_leaves_fuser_untouched(self):
        model, head, batch, (o1, o2, o3) = self.setup_batch()
        diag = st.AdversarialStepDiag()
        st.adversarial_batch_step(model, head, batch, o1, o2, o3, 1.0, diag=diag)
        for k in diag.fuser_before_step2:
            np.testing.assert_array_equal(diag.fuser_before_step2[k], diag.fuser_after_step2[k])

    def test_step3_leaves_head_untouched(self):
        model, head, batch, (o1, o2, o3) = self.setup_batch()
        diag = st.AdversarialStepDiag()
        st.adversarial_batch_step(model, head, batch, o1, o2, o3, 1.0, diag=diag)
        for k in diag.head_before_step3:
            np.testing.assert_array_equal(diag.head_before_step3[k], diag.head_after_step3[k])

    def test_step3_gradient_is_minus_lambda_times_unreversed(self):
        lam = 1.7
        model, head, batch, (o1, o2, o3) = self.setup_batch()
        diag = st.AdversarialStepDiag()
        st.adversarial_batch_step(model, head, batch, o1, o2, o3, lam, diag=diag)
        assert diag.steps_run == 3
        for k, g in diag.fuser_grads_unreversed.items():
            np.testing.assert_array_equal(diag.fuser_grads_reversed[k], -lam * g)

    def test_single_domain_batch_skips_domain_steps(self):
        model, head, batch, (o1, o2, o3) = self.setup_batch()
        real_only = [it for it in batch if it.domain_idx == 0]
        head_before = {k: v.copy() for k, v in head.params().items()}
        loss, domain_loss, ran = st.adversarial_batch_step(
            model, head, real_only, o1, o2, o3, 1.0
        )
        assert not ran
        assert np.isnan(domain_loss)
        for k, v in head.params().items():
            np.testing.assert_array_equal(v, head_before[k])

    def test_full_run_logs_domain_loss(self):
        fold = make_fold(n_train=16)
        synth = make_synth(8)
        plan = quick_plan(strategy="adversarial", epochs=2)
        trained = st.train_adversarial(fold, synth, plan, seed=3)
        assert trained.head is not None
        assert all(log.domain_loss is not None for log in trained.logs)

    def test_deterministic(self):
        fold = make_fold(n_train=16)
        synth = make_synth(8)
        plan = quick_plan(strategy="adversarial", epochs=3)
        a = st.train_adversarial(fold, synth, plan, seed=3)
        b = st.train_adversarial(fold, synth, plan, seed=3)
        for k, v in a.model.params().items():
            np.testing.assert_array_equal(v, b.model.params()[k])
        for k, v in a.head.params().items():
            np.testing.assert_array_equal(v, b.head.params()[k])


class TestRunPlan:
    def test_baseline_over_blob_folds(self, blob_corpus):
        records, base = blob_corpus
        plan = st.TrainPlan(strategy="baseline", epochs=8, batch_size=16, seed=42, hidden=16)
        outputs = st.run_plan(records, base, plan)
        assert [t.result.fold_index for t in outputs] == [1, 2, 3, 4, 5]
        for t in outputs:
            assert t.result.confusion.sum() == 20

    def test_single_fold_selection(self, blob_corpus):
        records, base = blob_corpus
        plan = st.TrainPlan(strategy="baseline", epochs=2, batch_size=16, seed=42, hidden=16)
        outputs = st.run_plan(records, base, plan, only_folds=[3])
        assert len(outputs) == 1
        assert outputs[0].result.fold_index == 3

    def test_augmented_needs_synthetic(self, tmp_path):
        records = corpus.generate_blob_corpus(tmp_path, n_per_class=5, n_synthetic=0, seed=1)
        plan = st.TrainPlan(strategy="random_mix", epochs=1, seed=1)
        with pytest.raises(DataError, match="synthetic"):
            st.run_plan(records, tmp_path, plan)

    @pytest.mark.filterwarnings("ignore:classes .* have no utterances")
    def test_shift_free_augmentation_does_not_hurt(self, tmp_path):
        records = corpus.generate_blob_corpus(
            tmp_path, n_per_class=10, n_synthetic=40, domain_shift=0.0, seed=9,
        )
        base_plan = st.TrainPlan(strategy="baseline", epochs=10, batch_size=16,
                                 seed=9, hidden=16)
        mix_plan = st.TrainPlan(strategy="random_mix", epochs=10, batch_size=16,
                                seed=9, hidden=16, ratio=0.5)
        base_wa = np.mean([t.result.wa for t in st.run_plan(records, tmp_path, base_plan)])
        mix_wa = np.mean([t.result.wa for t in st.run_plan(records, tmp_path, mix_plan)])
        assert mix_wa >= base_wa - 0.01

    def test_transfer_tracks_random_mix_on_shifted_blob(self, blob_corpus):
        # seed-fixed expectation mirroring the reported strategy ordering,
        # at the reference 50-epoch configuration
        records, base = blob_corpus
        common = dict(epochs=50, batch_size=16, seed=42, ratio=0.5)
        mix = st.run_plan(records, base, st.TrainPlan(strategy="random_mix", **common))
        transfer = st.run_plan(records, base, st.TrainPlan(strategy="transfer", **common))
        mix_wa = np.mean([t.result.wa for t in mix])
        transfer_wa = np.mean([t.result.wa for t in transfer])
        assert transfer_wa >= mix_wa - 1e-9

    def test_plan_for_ratio_zero_is_baseline(self):
        plan = st.TrainPlan(strategy="curriculum", ratio=0.5, epochs=50)
        assert st.plan_for_ratio(plan, 0.0).strategy == "baseline"
        assert st.plan_for_ratio(plan, 0.25).ratio == 0.25
        assert st.plan_for_ratio(plan, 0.25).strategy == "curriculum"
