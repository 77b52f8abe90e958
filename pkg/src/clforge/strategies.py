"""Sequential-task training engine.

Tasks are learned strictly in order; once task t starts, only its own
train/val splits, the rehearsal memory and the previous model are
reachable. Each strategy decides how the adapted checkpoint for task t
is produced and what the sequence model becomes afterwards:

  finetune       minimize the hybrid loss on the new task; the adapted
                 checkpoint becomes the model
  separate       fine-tuning trajectory, but every task is evaluated
                 with the model that first learned it (upper bound,
                 stores one model per task)
  freeze_shared  after task 1, shared parameters receive no updates
  er             every step mixes a new-task mini-batch with one drawn
                 from memory, equally weighted, both under the hybrid
                 loss
  kd_rehearsal   hybrid loss on new-task batches plus a distillation
                 term computed on memory batches against the previous
                 model
  lwf            hybrid loss plus distillation on *new-task* batches
                 against the previous model (memory-free)
  fta            finetune, then blend old and adapted weights
  lwfa           lwf, then the same blend

The optimizer is plain SGD with a fixed learning rate and global
gradient-norm clipping, with early stopping on validation loss
(best-epoch weights are restored). Task 1 always uses a blend weight of
1 (there is no older model) and never distills. With task-owned heads
and ``two_stage``, tasks after the first train the fresh head alone
(shared entries frozen, no distillation) before training everything.

A run is fully deterministic given its seed: shuffles, memory draws and
head initializations all derive from it, with identical streams across
strategies so that degenerate configurations coincide exactly (for
example, a constant blend weight of 1 reproduces plain fine-tuning
bitwise, and lwfa with lam=0 is trajectory-identical to fta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .errors import ConfigError, QuotaUnderflow, TrainingDiverged
from .metrics import WerMatrix, edit_distance
from .model import (ForwardOut, ModelConfig, Utterance, forward, greedy_decode,
                    head_spec, init_params, loss_and_grad)
from .params import (AveragingSchedule, ParamStore, average, eta_for_task,
                     init_task_head)
from .rng import derive_seed, generator
from .tasks import TaskSpec, synthesize

STRATEGY_KINDS = ("finetune", "separate", "freeze_shared", "er", "kd_rehearsal",
                  "lwf", "fta", "lwfa")
_KD_KINDS = ("lwf", "lwfa", "kd_rehearsal")
_REHEARSAL_KINDS = ("er", "kd_rehearsal")
_AVERAGING_KINDS = ("fta", "lwfa")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    batch_size: int = 16
    max_epochs: int = 18
    patience: int = 3
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("train.batch_size, max_epochs and patience must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("train.clip_norm must be > 0")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    schedule: AveragingSchedule | None = None  # fta / lwfa
    lam: float | None = None  # lwf / lwfa / kd_rehearsal; None -> loss.lam
    memory: int | None = None  # er / kd_rehearsal
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    two_stage: bool = True  # takes effect with task-owned heads only

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.kind in _AVERAGING_KINDS and self.schedule is None:
            raise ConfigError(f"strategy {self.kind!r} requires a schedule")
        if self.kind not in _AVERAGING_KINDS and self.schedule is not None:
            raise ConfigError(f"strategy {self.kind!r} takes no schedule")
        if self.kind in _REHEARSAL_KINDS:
            if self.memory is None or self.memory < 1:
                raise ConfigError(f"strategy {self.kind!r} requires memory >= 1")
        elif self.memory is not None:
            raise ConfigError(f"strategy {self.kind!r} takes no memory")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("strategy lam must be >= 0")

    def effective_lam(self) -> float:
        if self.kind not in _KD_KINDS:
            return 0.0
        return self.loss.lam if self.lam is None else self.lam


@dataclass
class MemoryBuffer:
    """Fixed-capacity rehearsal store, rebalanced to floor(M/t) per task."""

    capacity: int
    slots: dict = field(default_factory=dict)  # task_id -> list[Utterance]

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"memory capacity must be >= 1, got {self.capacity}")

    def total(self) -> int:
        return sum(len(v) for v in self.slots.values())

    def tasks(self) -> tuple:
        return tuple(self.slots)

    def all_utterances(self) -> list:
        out = []
        for task_id in self.slots:
            out.extend(self.slots[task_id])
        return out


def rebalance_memory(buffer: MemoryBuffer, new_task_id: int, new_task_data,
                     rng: np.random.Generator) -> MemoryBuffer:
    """Admit a freshly learned task and equalize the per-task quotas.

    With t tasks seen, every task holds exactly floor(M/t) utterances:
    existing slots are uniformly down-sampled in place (old training
    sets are gone), the new task is uniformly sampled from its training
    set.
    """
    if new_task_id in buffer.slots:
        raise ConfigError(f"task {new_task_id} is already in the memory")
    t = len(buffer.slots) + 1
    quota = buffer.capacity // t
    if quota < 1:
        raise QuotaUnderflow(
            f"memory capacity {buffer.capacity} cannot give {t} tasks a slot each"
        )
    if len(new_task_data) < quota:
        raise ConfigError(
            f"task {new_task_id} training set ({len(new_task_data)}) smaller than the "
            f"memory quota ({quota})"
        )
    slots = {}
    for task_id, kept in buffer.slots.items():
        idx = sorted(rng.choice(len(kept), size=quota, replace=False))
        slots[task_id] = [kept[i] for i in idx]
    idx = sorted(rng.choice(len(new_task_data), size=quota, replace=False))
    slots[new_task_id] = [new_task_data[i] for i in idx]
    return MemoryBuffer(buffer.capacity, slots)


@dataclass
class SequenceState:
    """Everything a strategy carries across the task sequence."""

    params: ParamStore  # model after the last learned task
    adapted: list = field(default_factory=list)  # pre-blend checkpoints, one per task
    models: list = field(default_factory=list)  # post-blend models, one per task
    memory: MemoryBuffer | None = None
    logs: list = field(default_factory=list)
    ft_reference: list | None = None  # fine-tuning diagonal, for FWT


def _trainable_names(params: ParamStore, task_id: int, head_only: bool,
                     freeze_shared: bool) -> list:
    names = []
    for e in params:
        if e.tag.is_shared:
            if not (head_only or freeze_shared):
                names.append(e.name)
        elif e.tag.task_id == task_id:  # past tasks' heads stay frozen
            names.append(e.name)
    return names


def _accumulate(acc, grads):
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def _scaled(acc, scale):
    return {k: v * scale for k, v in acc.items()}


def _combined(a, b):
    return {k: a[k] + b[k] for k in a}


def _validation_loss(params, model_cfg, val_set, alpha) -> float:
    total = 0.0
    for utt in val_set:
        out = forward(params, model_cfg, utt)
        v = 0.0
        if alpha > 0.0:
            v += alpha * losses.ctc_loss_value(out.ctc_logprobs, utt.target)
        if alpha < 1.0:
            v += (1.0 - alpha) * losses.ce_loss(out.dec_logprobs, utt.target)
        total += v
    return total / len(val_set)


def _batch_terms(params, model_cfg, utts, loss_cfg, lam, teacher_store,
                 teacher_task_id, include_hybrid, freeze_shared):
    """Mean loss and mean gradient over one mini-batch."""
    acc = None
    loss_sum = 0.0
    for utt in utts:
        teacher_out = None
        if lam > 0.0:
            tid = utt.task_id if teacher_task_id is None else teacher_task_id
            teacher_out = forward(teacher_store, model_cfg, utt, task_id=tid)
        val, grads = loss_and_grad(params, model_cfg, utt, loss_cfg,
                                   teacher=teacher_out, lam=lam,
                                   include_hybrid=include_hybrid,
                                   freeze_shared=freeze_shared)
        loss_sum += val
        acc = _accumulate(acc, grads)
    n = len(utts)
    return loss_sum / n, _scaled(acc, 1.0 / n)


def _clip_gradients(grads, clip_norm):
    sq = 0.0
    for v in grads.values():
        sq += float(np.vdot(v, v))
    norm = math.sqrt(sq)
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = _scaled(grads, scale)
    return grads, norm


def _sgd_stage(params, model_cfg, train_set, val_set, strategy, stage_name,
               task, lam, teacher_store, memory, head_only, freeze_shared,
               run_seed):
    """One early-stopped SGD pass; returns (best params, stage log)."""
    t = task.task_id
    tc = strategy.train
    loss_cfg = strategy.loss
    alpha = loss_cfg.alpha
    kind = strategy.kind
    trainable = _trainable_names(params, t, head_only, freeze_shared)
    log = {"stage": stage_name, "lam": lam, "epochs": [],
           "trainable_entries": len(trainable)}
    if not trainable:
        log["note"] = "no trainable entries; stage skipped"
        return params, log

    best_params = params
    best_val = math.inf
    best_epoch = 0
    epochs_since_best = 0
    n = len(train_set)
    for epoch in range(1, tc.max_epochs + 1):
        order = generator(run_seed, "shuffle", t, stage_name, epoch).permutation(n)
        mem_rng = None
        mem_pool = None
        if kind in _REHEARSAL_KINDS and memory is not None and memory.total() > 0:
            mem_rng = generator(run_seed, "memory-draw", t, stage_name, epoch)
            mem_pool = memory.all_utterances()
        epoch_loss = 0.0
        n_steps = 0
        for start in range(0, n, tc.batch_size):
            batch = [train_set[i] for i in order[start : start + tc.batch_size]]
            new_loss, new_grads = _batch_terms(
                params, model_cfg, batch, loss_cfg,
                lam if kind in ("lwf", "lwfa") else 0.0,
                teacher_store, t, True, freeze_shared or head_only)
            step_loss, step_grads = new_loss, new_grads
            if mem_pool is not None:
                picks = mem_rng.choice(len(mem_pool), size=min(tc.batch_size, len(mem_pool)),
                                       replace=False)
                mem_batch = [mem_pool[i] for i in picks]
                if kind == "er":
                    mem_loss, mem_grads = _batch_terms(
                        params, model_cfg, mem_batch, loss_cfg, 0.0, None, None,
                        True, freeze_shared or head_only)
                    step_loss = 0.5 * (new_loss + mem_loss)
                    step_grads = _combined(_scaled(new_grads, 0.5), _scaled(mem_grads, 0.5))
                else:  # kd_rehearsal: distill old behaviour on memory batches
                    mem_loss, mem_grads = _batch_terms(
                        params, model_cfg, mem_batch, loss_cfg, lam, teacher_store,
                        None, False, freeze_shared or head_only)
                    step_loss = new_loss + mem_loss
                    step_grads = _combined(new_grads, mem_grads)
            if not math.isfinite(step_loss):
                raise TrainingDiverged(
                    f"non-finite loss while training task {t}",
                    {"task": t, "stage": stage_name, "epoch": epoch,
                     "step": n_steps + 1, "loss": step_loss,
                     "strategy": kind, "batch_size": len(batch)})
            step_grads, _ = _clip_gradients(step_grads, tc.clip_norm)
            params = params.with_updates({
                name: params.values(name) - tc.learning_rate * step_grads[name]
                for name in trainable
            })
            epoch_loss += step_loss
            n_steps += 1
        val_loss = _validation_loss(params, model_cfg, val_set, alpha)
        log["epochs"].append({"epoch": epoch, "train_loss": epoch_loss / n_steps,
                              "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_params = params
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= tc.patience:
                break
    log["best_epoch"] = best_epoch
    log["best_val_loss"] = best_val
    log["stopped_epoch"] = len(log["epochs"])
    return best_params, log


def _teacher_store(old: ParamStore, work: ParamStore, t: int, own_head: bool) -> ParamStore:
    """Previous model's shared part; with owned heads, the current task's head.

    New-task inputs go through the old shared parameters but, in
    task-owned-head mode, through the *current* task's head (the old
    model has no head for task t).
    """
    if not own_head:
        return old
    entries = [(e.name, e.values, e.tag) for e in old if e.tag.is_shared]
    entries += [(e.name, e.values, e.tag) for e in work
                if not e.tag.is_shared and e.tag.task_id == t]
    return ParamStore(entries)


def train_task(state: SequenceState, task: TaskSpec, train_set, val_set,
               strategy: StrategyConfig, model_cfg: ModelConfig,
               run_seed) -> SequenceState:
    """Learn one task under a strategy and fold it into the sequence state."""
    t = task.task_id
    if t != len(state.models) + 1:
        raise ConfigError(f"tasks must be trained in order: got task {t} after "
                          f"{len(state.models)} tasks")
    if not train_set:
        raise ConfigError(f"task {t}: empty training set")
    if not val_set:
        raise ConfigError(f"task {t}: validation split required for early stopping")
    kind = strategy.kind
    if kind in _REHEARSAL_KINDS and t >= 2 and (state.memory is None or state.memory.total() == 0):
        raise ConfigError(f"rehearsal strategy {kind!r} has an empty memory at task {t}")

    old = state.params
    work = old
    own_head = task.head_mode == "own"
    if own_head:
        work = init_task_head(work, t, head_spec(model_cfg),
                              derive_seed(run_seed, "head", t),
                              scale=model_cfg.init_scale)

    lam = strategy.effective_lam() if t > 1 else 0.0  # task 1 has no old model
    stages = []
    if strategy.two_stage and own_head and t > 1:
        stages.append(("head", True, 0.0))
        stages.append(("full", False, lam))
    else:
        stages.append(("full", False, lam))

    freeze_shared = kind == "freeze_shared" and t > 1
    teacher = None
    if lam > 0.0 and kind in ("lwf", "lwfa"):
        teacher = _teacher_store(old, work, t, own_head)
    elif lam > 0.0 and kind == "kd_rehearsal":
        teacher = old  # memory utterances use their own (old) heads

    params = work
    stage_logs = []
    for stage_name, head_only, stage_lam in stages:
        if kind in ("lwf", "lwfa") and stage_lam > 0.0:
            teacher = _teacher_store(old, params, t, own_head)
        params, slog = _sgd_stage(params, model_cfg, train_set, val_set, strategy,
                                  stage_name, task, stage_lam, teacher,
                                  state.memory, head_only, freeze_shared, run_seed)
        stage_logs.append(slog)
    adapted = params

    eta = None
    if kind in _AVERAGING_KINDS:
        eta = 1.0 if t == 1 else eta_for_task(strategy.schedule, t)
        new_params = average(old, adapted, eta)
    else:
        new_params = adapted

    memory = state.memory
    if kind in _REHEARSAL_KINDS:
        memory = rebalance_memory(memory, t, train_set,
                                  generator(run_seed, "memory", t))

    task_log = {"task": t, "strategy": kind, "eta": eta, "stages": stage_logs}
    return replace(
        state,
        params=new_params,
        adapted=state.adapted + [adapted],
        models=state.models + [new_params],
        memory=memory,
        logs=state.logs + [task_log],
    )


def evaluate_wer(params: ParamStore, model_cfg: ModelConfig, test_set,
                 task_id: int, max_len: int) -> float:
    """Corpus-level error rate: total edit distance over total reference length."""
    dist = 0
    total = 0
    for utt in test_set:
        hyp = greedy_decode(params, model_cfg, utt.features, task_id, max_len)
        dist += edit_distance(hyp, utt.target)
        total += len(utt.target)
    return dist / total


def decode_max_len(spec: TaskSpec) -> int:
    return 2 * spec.target_len[1] + 4


def run_sequence(suite, strategy: StrategyConfig, model_cfg: ModelConfig, seed,
                 provider=None, ft_reference=None):
    """Train all tasks in order and fill the evaluation grid.

    ``provider(task_spec, split)`` supplies datasets (defaults to
    synthesizing them); the training loop for task t is handed only
    task t's train/val splits, so earlier tasks' data is unreachable by
    construction. After learning task t the current model is scored on
    the test split of every task j <= t; the separate-model strategy
    scores task j with the model that first learned it.
    """
    T = len(suite)
    if T < 2:
        raise ConfigError(f"a task sequence needs at least 2 tasks, got {T}")
    for pos, spec in enumerate(suite, start=1):
        if spec.task_id != pos:
            raise ConfigError(f"suite task ids must be 1..T in order, got {spec.task_id} at {pos}")
    if provider is None:
        provider = synthesize
    shared_head = suite[0].head_mode == "shared"
    theta0 = init_params(model_cfg, derive_seed(seed, "init"), shared_head=shared_head)
    memory = MemoryBuffer(strategy.memory) if strategy.kind in _REHEARSAL_KINDS else None
    state = SequenceState(params=theta0, memory=memory, ft_reference=ft_reference)
    grid = WerMatrix(T)
    for task in suite:
        t = task.task_id
        train_set = provider(task, "train")
        val_set = provider(task, "val")
        state = train_task(state, task, train_set, val_set, strategy, model_cfg, seed)
        for j in range(1, t + 1):
            if strategy.kind == "separate" and j < t:
                grid.set(t, j, grid.get(j, j))  # task j keeps its own frozen model
                continue
            spec_j = suite[j - 1]
            test_set = provider(spec_j, "test")
            grid.set(t, j, evaluate_wer(state.params, model_cfg, test_set, j,
                                        decode_max_len(spec_j)))
    return grid, state
