"""Training regimes: baseline, random mixing, adversarial, transfer, curriculum.

All regimes share one seeded mini-batch engine and differ only in what data
each epoch sees and which parameters each update touches. Adversarial
training optimizes every batch in three steps: (1) emotion cross-entropy
into the fuser and classifier, (2) domain BCE into the domain head only,
(3) domain BCE reversed through the gradient-reversal layer into the fuser
only, each step with its own AdamW state. Runs are bit-reproducible: one
RNG stream per fold, fixed accumulation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import model_core as mc
from .corpus import (
    CLASSES,
    FoldSplit,
    Item,
    UtteranceRecord,
    load_items,
    make_folds,
    sample_ratio,
    select_synthetic_subset,
)
from .errors import DataError
from .metrics import FoldResult, confusion_matrix, fold_result, wa_ua
from .utils import derive_np_rng, derive_rng, derive_seed

STRATEGIES = ("baseline", "random_mix", "adversarial", "transfer", "curriculum")
REPR_MODES = ("last_layer", "weighted_layers")
CHECKPOINT_POLICIES = ("best_val", "last_epoch")


@dataclass
class TrainPlan:
    strategy: str = "baseline"
    epochs: int = 50
    batch_size: int = 128
    seed: int = 42
    ratio: float = 0.5
    repr_mode: str = "last_layer"
    lr: float = 1e-3
    weight_decay: float = 2e-3
    hidden: int = 128
    lambda_grl: float = 1.0
    transfer_lr_factor: float = 0.1
    phase1_epochs: int | None = None  # transfer phase 1; defaults to epochs
    curriculum_chunks: int = 5
    curriculum_interval: int = 5
    checkpoint_policy: str | None = None  # resolved per strategy when unset

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown strategy {self.strategy!r}")
        if self.repr_mode not in REPR_MODES:
            raise DataError(f"unknown repr_mode {self.repr_mode!r}")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.strategy != "baseline" and not self.ratio > 0:
            raise DataError("ratio must be > 0 for augmented strategies")
        if self.curriculum_chunks < 1 or self.curriculum_interval < 1:
            raise DataError("curriculum chunks and interval must be >= 1")
        if (
            self.strategy == "curriculum"
            and (self.curriculum_chunks - 1) * self.curriculum_interval >= self.epochs
        ):
            raise DataError(
                "curriculum schedule does not fit: (chunks-1)*interval must be < epochs"
            )
        if self.checkpoint_policy is not None and self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise DataError(f"unknown checkpoint_policy {self.checkpoint_policy!r}")
        if self.lambda_grl < 0:
            raise DataError("lambda_grl must be >= 0")


@dataclass
class EpochLog:
    fold: int
    strategy: str
    epoch: int  # 1-indexed
    train_loss: float
    val_wa: float
    val_ua: float
    active_synth: int
    domain_loss: float | None = None
    domain_steps_skipped: int | None = None

    def as_row(self) -> dict:
        row = {
            "fold": self.fold,
            "strategy": self.strategy,
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_wa": self.val_wa,
            "val_ua": self.val_ua,
            "active_synth": self.active_synth,
        }
        if self.domain_loss is not None:
            row["domain_loss"] = self.domain_loss
            row["domain_steps_skipped"] = self.domain_steps_skipped
        return row


@dataclass
class FoldData:
    fold_index: int
    train: list[Item]
    val: list[Item]
    test: list[Item]


@dataclass
class TrainedFold:
    model: mc.SerModel
    head: mc.DomainHead | None
    logs: list[EpochLog]
    selected_epoch: int
    result: FoldResult | None = None
    phase1_model: mc.SerModel | None = None  # transfer only: pre-migration snapshot


@dataclass
class AdversarialStepDiag:
    """Per-step snapshots for one batch, for auditing update scopes."""

    fuser_before_step2: dict[str, np.ndarray] = field(default_factory=dict)
    fuser_after_step2: dict[str, np.ndarray] = field(default_factory=dict)
    head_before_step3: dict[str, np.ndarray] = field(default_factory=dict)
    head_after_step3: dict[str, np.ndarray] = field(default_factory=dict)
    fuser_grads_unreversed: dict[str, np.ndarray] = field(default_factory=dict)
    fuser_grads_reversed: dict[str, np.ndarray] = field(default_factory=dict)
    steps_run: int = 0


def effective_checkpoint_policy(plan: TrainPlan) -> str:
    """Augmented strategies always keep the last epoch; baseline may track val."""
    if plan.strategy == "baseline":
        return plan.checkpoint_policy or "best_val"
    if plan.checkpoint_policy == "best_val":
        warnings.warn(
            f"checkpoint_policy=best_val ignored for {plan.strategy}; using last_epoch",
            stacklevel=2,
        )
    return "last_epoch"


def select_checkpoint(logs: list[EpochLog], policy: str) -> int:
    """Pick the checkpoint epoch: final epoch, or argmax val WA (earliest tie)."""
    if not logs:
        raise DataError("no epoch logs to select from")
    if policy == "last_epoch":
        return logs[-1].epoch
    if policy == "best_val":
        best = logs[0]
        for log in logs[1:]:
            if log.val_wa > best.val_wa:
                best = log
        return best.epoch
    raise DataError(f"unknown checkpoint policy {policy!r}")


def evaluate(model: mc.SerModel, items: list[Item]) -> np.ndarray:
    y_true = [it.label_idx for it in items]
    y_pred = [mc.predict(model, it.x) for it in items]
    return confusion_matrix(y_true, y_pred, len(CLASSES))


def train_baseline(fold: FoldData, plan: TrainPlan, seed: int) -> TrainedFold:
    """Real data only; checkpoint policy defaults to best validation WA."""
    return _train_stream(
        fold, plan, seed,
        epoch_data=lambda epoch: (fold.train, 0),
        policy=effective_checkpoint_policy(plan),
    )


def train_random_mix(
    fold: FoldData, synthetic: list[Item], plan: TrainPlan, seed: int
) -> TrainedFold:
    """Union of real and synthetic in one shuffled stream; last-epoch checkpoint."""
    mixed = fold.train + synthetic
    return _train_stream(
        fold, plan, seed,
        epoch_data=lambda epoch: (mixed, len(synthetic)),
        policy=effective_checkpoint_policy(plan),
    )


def train_curriculum(
    fold: FoldData, synthetic: list[Item], plan: TrainPlan, seed: int
) -> TrainedFold:
    """Inject duration-sorted synthetic chunks on a fixed epoch interval."""
    chunks = curriculum_chunks(synthetic, plan.curriculum_chunks)

    def epoch_data(epoch: int) -> tuple[list[Item], int]:
        active = active_curriculum_items(chunks, epoch - 1, plan.curriculum_interval)
        return fold.train + active, len(active)

    return _train_stream(
        fold, plan, seed, epoch_data=epoch_data, policy=effective_checkpoint_policy(plan)
    )


def train_transfer(
    fold: FoldData, synthetic: list[Item], plan: TrainPlan, seed: int
) -> TrainedFold:
    """Pretrain on synthetic, then continue on real data at a reduced rate.

    Phase 2 starts from the phase-1 parameters but with fresh optimizer
    moments, since second-moment statistics from the synthetic distribution
    would distort early updates at the new learning rate.
    """
    if not synthetic:
        raise DataError("transfer learning requires a non-empty synthetic set")
    plan.validate()
    _warn_missing_classes(fold.train)
    model = _init_model(plan, fold.train, seed)
    rng = derive_rng(seed, "transfer-shuffle")
    logs: list[EpochLog] = []

    phase1_epochs = plan.phase1_epochs if plan.phase1_epochs is not None else plan.epochs
    opt1 = mc.AdamW(lr=plan.lr, weight_decay=plan.weight_decay)
    for epoch in range(1, phase1_epochs + 1):
        loss = _run_epoch(model, synthetic, plan.batch_size, opt1, rng)
        logs.append(_epoch_log(fold, plan, epoch, loss, model, active_synth=len(synthetic)))
    phase1_model = model.copy()

    opt2 = mc.AdamW(lr=plan.lr * plan.transfer_lr_factor, weight_decay=plan.weight_decay)
    for epoch in range(phase1_epochs + 1, phase1_epochs + plan.epochs + 1):
        loss = _run_epoch(model, fold.train, plan.batch_size, opt2, rng)
        logs.append(_epoch_log(fold, plan, epoch, loss, model, active_synth=0))

    return TrainedFold(
        model=model, head=None, logs=logs, selected_epoch=logs[-1].epoch,
        phase1_model=phase1_model,
    )


def train_adversarial(
    fold: FoldData, synthetic: list[Item], plan: TrainPlan, seed: int
) -> TrainedFold:
    """Three-step domain-adversarial training with per-step AdamW states."""
    if not synthetic:
        raise DataError("adversarial training requires a non-empty synthetic set")
    plan.validate()
    _warn_missing_classes(fold.train)
    model = _init_model(plan, fold.train, seed)
    head = mc.DomainHead.init(derive_np_rng(seed, "domain-head"), hidden=plan.hidden)
    rng = derive_rng(seed, "adversarial-shuffle")

    opt_task = mc.AdamW(lr=plan.lr, weight_decay=plan.weight_decay)
    opt_domain = mc.AdamW(lr=plan.lr, weight_decay=plan.weight_decay)
    opt_fuser = mc.AdamW(lr=plan.lr, weight_decay=plan.weight_decay)

    mixed = fold.train + synthetic
    logs: list[EpochLog] = []
    for epoch in range(1, plan.epochs + 1):
        order = list(range(len(mixed)))
        rng.shuffle(order)
        total_loss = 0.0
        total_domain = 0.0
        domain_batches = 0
        skipped = 0
        for start in range(0, len(order), plan.batch_size):
            batch = [mixed[i] for i in order[start:start + plan.batch_size]]
            loss, domain_loss, ran_domain = adversarial_batch_step(
                model, head, batch, opt_task, opt_domain, opt_fuser, plan.lambda_grl
            )
            total_loss += loss * len(batch)
            if ran_domain:
                total_domain += domain_loss
                domain_batches += 1
            else:
                skipped += 1
        log = _epoch_log(
            fold, plan, epoch, total_loss / len(mixed), model, active_synth=len(synthetic)
        )
        log.domain_loss = total_domain / domain_batches if domain_batches else float("nan")
        log.domain_steps_skipped = skipped
        logs.append(log)

    return TrainedFold(model=model, head=head, logs=logs, selected_epoch=logs[-1].epoch)


def adversarial_batch_step(
    model: mc.SerModel,
    head: mc.DomainHead,
    batch: list[Item],
    opt_task: mc.AdamW,
    opt_domain: mc.AdamW,
    opt_fuser: mc.AdamW,
    lambda_grl: float,
    diag: AdversarialStepDiag | None = None,
) -> tuple[float, float, bool]:
    """Run the three optimization steps on one batch.

    Step 1 updates the fuser and SER classifier with emotion cross-entropy
    over every labeled item (synthetic labels included). Step 2 updates the
    domain head only: the fuser gradient is discarded. Step 3 recomputes the
    domain loss and sends it through gradient reversal into the fuser only.
    Returns (mean emotion loss, mean domain loss of step 2, domain steps ran).
    Batches with a single domain skip steps 2 and 3.
    """
    loss, grads = _task_batch_grads(model, batch)
    opt_task.step(model.params(), grads)

    domains = {it.domain_idx for it in batch}
    if len(domains) < 2:
        return loss, float("nan"), False

    if diag is not None:
        diag.fuser_before_step2 = _copy_params(model.fuser_params())

    # Step 2: domain BCE, domain head only; fuser untouched.
    head_grads = _zeros_like(head.params())
    domain_loss = 0.0
    for it in batch:
        _, trace = mc.forward(model, it.x)
        logit, dtrace = mc.domain_forward(head, trace.e)
        item_loss, dlogit = mc.bce_logit(logit, it.domain_idx)
        domain_loss += item_loss
        item_grads, _ = mc.domain_backward(head, dtrace, dlogit)
        _accumulate(head_grads, item_grads)
    _scale(head_grads, 1.0 / len(batch))
    domain_loss /= len(batch)
    opt_domain.step(head.params(), head_grads)

    if diag is not None:
        diag.fuser_after_step2 = _copy_params(model.fuser_params())
        diag.head_before_step3 = _copy_params(head.params())

    # Step 3: domain BCE again, reversed into the fuser; head untouched.
    fuser_grads = _zeros_like(model.fuser_params())
    for it in batch:
        _, trace = mc.forward(model, it.x)
        logit, dtrace = mc.domain_forward(head, trace.e)
        _, dlogit = mc.bce_logit(logit, it.domain_idx)
        _, de = mc.domain_backward(head, dtrace, dlogit)
        _accumulate(fuser_grads, mc.backward_from_embedding(model, trace, de))
    _scale(fuser_grads, 1.0 / len(batch))
    reversed_grads = {k: mc.grad_reverse(g, lambda_grl) for k, g in fuser_grads.items()}
    if diag is not None:
        diag.fuser_grads_unreversed = _copy_params(fuser_grads)
        diag.fuser_grads_reversed = _copy_params(reversed_grads)
    opt_fuser.step(model.fuser_params(), reversed_grads)

    if diag is not None:
        diag.head_after_step3 = _copy_params(head.params())
        diag.steps_run = 3

    return loss, domain_loss, True


def curriculum_chunks(synthetic: list[Item], k: int) -> list[list[Item]]:
    """Duration-sorted (ties by id) near-equal chunks, order preserved."""
    ordered = sorted(synthetic, key=lambda it: (it.duration_s, it.id))
    bounds = np.linspace(0, len(ordered), k + 1).round().astype(int)
    return [ordered[bounds[i]:bounds[i + 1]] for i in range(k)]


def active_curriculum_items(
    chunks: list[list[Item]], epoch0: int, interval: int
) -> list[Item]:
    """Chunks 0..floor(epoch0/interval), capped at the final chunk."""
    upto = min(epoch0 // interval, len(chunks) - 1)
    return [it for chunk in chunks[: upto + 1] for it in chunk]


def run_plan(
    records: list[UtteranceRecord],
    base_dir,
    plan: TrainPlan,
    only_folds: list[int] | None = None,
) -> list[TrainedFold]:
    """Execute the plan over all leave-one-session-out folds."""
    plan.validate()
    folds = make_folds(records, plan.seed)
    if only_folds:
        folds = [f for f in folds if f.fold_index in only_folds]

    needs_synth = plan.strategy != "baseline"
    synth_pool = select_synthetic_subset(records) if needs_synth else []
    if needs_synth and not synth_pool:
        raise DataError(f"strategy {plan.strategy!r} needs synthetic records, none found")

    cache: dict[str, Item] = {}
    by_id = {r.id: r for r in records}

    def fetch(ids: list[str]) -> list[Item]:
        missing = [i for i in ids if i not in cache]
        for item in load_items([by_id[i] for i in missing], base_dir):
            cache[item.id] = item
        return [cache[i] for i in ids]

    outputs = []
    for split in folds:
        fold_seed = derive_seed(plan.seed, "fold", split.fold_index)
        data = FoldData(
            fold_index=split.fold_index,
            train=fetch(split.train_ids),
            val=fetch(split.val_ids),
            test=fetch(split.test_ids),
        )
        if needs_synth:
            sampled = sample_ratio(
                synth_pool, len(split.train_ids), plan.ratio,
                derive_seed(plan.seed, "synth", split.fold_index),
            )
            synth_items = fetch([r.id for r in sampled])
        else:
            synth_items = []
        trained = dispatch(data, synth_items, plan, fold_seed)
        trained.result = fold_result(split.fold_index, evaluate(trained.model, data.test))
        outputs.append(trained)
    return outputs


def dispatch(
    fold: FoldData, synthetic: list[Item], plan: TrainPlan, seed: int
) -> TrainedFold:
    if plan.strategy == "baseline":
        return train_baseline(fold, plan, seed)
    if plan.strategy == "random_mix":
        return train_random_mix(fold, synthetic, plan, seed)
    if plan.strategy == "adversarial":
        return train_adversarial(fold, synthetic, plan, seed)
    if plan.strategy == "transfer":
        return train_transfer(fold, synthetic, plan, seed)
    if plan.strategy == "curriculum":
        return train_curriculum(fold, synthetic, plan, seed)
    raise DataError(f"unknown strategy {plan.strategy!r}")


def plan_for_ratio(plan: TrainPlan, ratio: float) -> TrainPlan:
    """Sweep helper: ratio 0 falls back to the baseline strategy."""
    if ratio == 0:
        return replace(plan, strategy="baseline", checkpoint_policy=None)
    return replace(plan, ratio=ratio)


# ---------------------------------------------------------------------------
# Shared engine


def _train_stream(fold, plan, seed, epoch_data, policy) -> TrainedFold:
    plan.validate()
    _warn_missing_classes(fold.train)
    model = _init_model(plan, fold.train, seed)
    opt = mc.AdamW(lr=plan.lr, weight_decay=plan.weight_decay)
    rng = derive_rng(seed, "shuffle")

    logs: list[EpochLog] = []
    best_model = None
    best_wa = -1.0
    for epoch in range(1, plan.epochs + 1):
        items, active_synth = epoch_data(epoch)
        loss = _run_epoch(model, items, plan.batch_size, opt, rng)
        log = _epoch_log(fold, plan, epoch, loss, model, active_synth)
        logs.append(log)
        if policy == "best_val" and log.val_wa > best_wa:
            best_wa = log.val_wa
            best_model = model.copy()

    selected = select_checkpoint(logs, policy)
    final = best_model if policy == "best_val" and best_model is not None else model
    return TrainedFold(model=final, head=None, logs=logs, selected_epoch=selected)


def _run_epoch(model, items, batch_size, opt, rng) -> float:
    order = list(range(len(items)))
    rng.shuffle(order)
    total = 0.0
    for start in range(0, len(order), batch_size):
        batch = [items[i] for i in order[start:start + batch_size]]
        loss, grads = _task_batch_grads(model, batch)
        opt.step(model.params(), grads)
        total += loss * len(batch)
    return total / len(items)


def _task_batch_grads(model, batch) -> tuple[float, dict[str, np.ndarray]]:
    grads = _zeros_like(model.params())
    total = 0.0
    for it in batch:
        logits, trace = mc.forward(model, it.x)
        loss, dlogits = mc.cross_entropy(logits, it.label_idx)
        total += loss
        _accumulate(grads, mc.backward(model, trace, dlogits))
    _scale(grads, 1.0 / len(batch))
    return total / len(batch), grads


def _epoch_log(fold, plan, epoch, loss, model, active_synth) -> EpochLog:
    wa, ua = wa_ua(evaluate(model, fold.val))
    return EpochLog(
        fold=fold.fold_index,
        strategy=plan.strategy,
        epoch=epoch,
        train_loss=loss,
        val_wa=wa,
        val_ua=ua,
        active_synth=active_synth,
    )


def _init_model(plan: TrainPlan, train_items: list[Item], seed: int) -> mc.SerModel:
    if not train_items:
        raise DataError("training set is empty")
    sample = train_items[0].x
    n_layers = sample.shape[0] if plan.repr_mode == "weighted_layers" else None
    return mc.SerModel.init(
        derive_np_rng(seed, "init"),
        in_dim=sample.shape[2],
        hidden=plan.hidden,
        n_classes=len(CLASSES),
        n_layers=n_layers,
    )


def _warn_missing_classes(train_items: list[Item]) -> None:
    present = {it.label_idx for it in train_items}
    missing = [CLASSES[i] for i in range(len(CLASSES)) if i not in present]
    if missing:
        warnings.warn(f"train set has no utterances for classes: {missing}", stacklevel=3)


def _zeros_like(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _accumulate(into: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for k, g in grads.items():
        into[k] += g


def _scale(grads: dict[str, np.ndarray], factor: float) -> None:
    for g in grads.values():
        g *= factor
