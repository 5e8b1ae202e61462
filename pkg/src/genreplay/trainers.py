"""Stage I (knowledge recording) and Stage II (knowledge inheritance) trainers.

Also holds the plain classifier trainer used for the first task and for the
joint-training reference, and :func:`run_sequence`, which chains the stages
over a whole task sequence.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import BalanceError, ConfigurationError, NonFiniteLossError
from .evaluation import MetricsTable, evaluate_task
from .inheritance import DistillConfig, cross_entropy_loss, inheritance_loss, kd_loss, lambda4
from .models import (
    GeneratorSpec,
    IncrementalClassifier,
    expand_head,
    extract_bn_stats,
    freeze,
    generate,
    new_generator,
    sample_noise,
)
from .recording import BNStatCollector, GeneratedBatch, RecordingLossWeights, recording_loss
from .tasks import LabeledSet, TaskSequence, TaskSpec, augment

log = logging.getLogger(__name__)


def derive_seed(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass
class ClassifierTrainConfig:
    epochs: int = 150
    learning_rate: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.5, 0.75)
    augment_pad: int = 0
    augment_flip: bool = False
    seed: int = 0


@dataclass
class RecordingConfig:
    epochs: int = 500
    steps_per_epoch: int = 100
    batch_size: int = 512
    learning_rate: float = 0.01
    optimizer_id: str = "rmsprop"
    weights: RecordingLossWeights = field(default_factory=RecordingLossWeights)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("recording batch_size must be >= 2")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigurationError("recording needs at least one epoch of at least one step")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class InheritanceConfig:
    epochs: int = 150
    learning_rate: float = 0.01
    new_batch_size: int = 128
    replay_ratio: tuple = (1, 1)
    distill: DistillConfig = field(default_factory=DistillConfig)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.5, 0.75)
    rejection_budget: int = 50
    replay: bool = True
    use_nkd: bool = True
    augment_pad: int = 0
    augment_flip: bool = False
    seed: int = 0

    def __post_init__(self):
        g, n = self.replay_ratio
        if g < 1 or n < 1:
            raise ConfigurationError("replay ratio terms must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("inheritance needs at least one epoch")


@dataclass
class StageOutput:
    model: nn.Module
    trace: list
    summary: dict


@dataclass
class ReplayBatch:
    images: torch.Tensor
    teacher_logits: torch.Tensor
    labels: torch.Tensor  # within-head labels of the real portion
    partition: dict  # "generated" / "real" -> (start, stop)
    pseudo_labels: torch.Tensor  # old-model argmax on the generated portion

    @property
    def generated(self) -> slice:
        return slice(*self.partition["generated"])

    @property
    def real(self) -> slice:
        return slice(*self.partition["real"])


def write_trace_csv(trace, path, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in trace:
            w.writerow([_csv_value(row.get(c, "")) for c in columns])
    return path


def _csv_value(v):
    return repr(v) if isinstance(v, float) else v


RECORDING_COLUMNS = ["step", "oh", "cd", "bn", "div", "total"]
INHERITANCE_COLUMNS = ["step", "epoch", "ce", "gkd", "nkd", "lambda4", "total"]
CLASSIFIER_COLUMNS = ["step", "epoch", "ce", "total"]


def _check_finite(stage, step, total, terms):
    if not math.isfinite(float(total.detach()) if torch.is_tensor(total) else float(total)):
        raise NonFiniteLossError(stage, step, terms)


def make_generator_optimizer(params, optimizer_id: str, lr: float):
    if optimizer_id == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr, alpha=0.99)
    if optimizer_id == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.999))
    if optimizer_id == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ConfigurationError(f"unknown optimizer {optimizer_id!r}")


def _classifier_optimizer(model, cfg, steps_per_epoch):
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    milestones = sorted({int(round(m * cfg.epochs)) * steps_per_epoch for m in cfg.milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=0.1)
    return opt, sched


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled index batches for one epoch; a trailing batch of 1 is merged away."""
    g = torch.Generator().manual_seed(derive_seed(seed, "shuffle", epoch))
    perm = torch.randperm(n, generator=g)
    chunks = list(perm.split(batch_size))
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = torch.cat([chunks[-1], tail])
    return chunks


def steps_per_epoch(n: int, batch_size: int) -> int:
    k = max(1, math.ceil(n / batch_size))
    if k > 1 and n % batch_size == 1:
        k -= 1
    return k


def within_head_labels(task: TaskSpec, labels: torch.Tensor) -> torch.Tensor:
    lut = {c: i for i, c in enumerate(task.class_set)}
    return torch.tensor([lut[int(c)] for c in labels], dtype=torch.long)


def _model_dtype(model):
    return next(model.parameters()).dtype


# -- plain classifier training --------------------------------------------------

def train_classifier(classifier: IncrementalClassifier, data: LabeledSet, column_labels: torch.Tensor,
                     cfg: ClassifierTrainConfig) -> StageOutput:
    """Cross-entropy over all output columns; used for the first task and joint training."""
    model = classifier
    n = len(data)
    spe = steps_per_epoch(n, cfg.batch_size)
    opt, sched = _classifier_optimizer(model, cfg, spe)
    aug_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "augment"))
    dtype = _model_dtype(model)
    trace, step, t0 = [], 0, time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            x = augment(data.images[idx], aug_rng, cfg.augment_pad, cfg.augment_flip).to(dtype)
            loss = nn.functional.cross_entropy(model(x), column_labels[idx])
            _check_finite("classifier", step, loss, {"ce": loss.item()})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            trace.append({"step": step, "epoch": epoch, "ce": loss.item(), "total": loss.item()})
            step += 1
    model.eval()
    return StageOutput(model, trace, {"steps": step, "final_loss": trace[-1]["total"],
                                      "seconds": time.perf_counter() - t0})


def train_initial(arch, task: TaskSpec, cfg: ClassifierTrainConfig) -> StageOutput:
    from .models import new_classifier

    model = new_classifier(arch, task.num_classes, seed=cfg.seed)
    return train_classifier(model, task.train, within_head_labels(task, task.train.labels), cfg)


# -- Stage I ----------------------------------------------------------------------

def record_knowledge(old_classifier: IncrementalClassifier, cfg: RecordingConfig,
                     log_every: int = 0) -> StageOutput:
    """Train a generator from noise so the frozen classifier sees confident, balanced,
    BN-consistent and mutually diverse images.

    The classifier is only run in eval mode and never updated.
    """
    teacher = old_classifier
    was_grad = [p.requires_grad for p in teacher.parameters()]
    freeze(teacher)
    stored = extract_bn_stats(teacher)
    dtype = _model_dtype(teacher)
    spec = cfg.generator
    if tuple(spec.out_shape) != tuple(teacher.arch.in_shape):
        raise ConfigurationError(
            f"generator output {tuple(spec.out_shape)} does not match classifier input {teacher.arch.in_shape}"
        )
    gen = new_generator(spec, teacher.num_classes, seed=derive_seed(cfg.seed, "generator-init")).to(dtype)
    opt = make_generator_optimizer(gen.parameters(), cfg.optimizer_id, cfg.learning_rate)
    noise_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "noise"))
    collector = BNStatCollector(teacher)
    trace, t0 = [], time.perf_counter()
    gen.train()
    try:
        for step in range(cfg.total_steps):
            z = sample_noise(gen, cfg.batch_size, noise_rng)
            images = gen(z)
            with collector:
                logits = teacher(images)
            batch = GeneratedBatch(images, logits, list(collector.stats))
            pair_rng = np.random.default_rng([cfg.seed, step])
            total, terms = recording_loss(batch, stored, cfg.weights, pair_rng)
            _check_finite("recording", step, total, terms)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            trace.append({"step": step, **terms})
            if log_every and step % log_every == 0:
                log.info("record step %d %s", step, terms)
    finally:
        for p, g in zip(teacher.parameters(), was_grad):
            p.requires_grad_(g)
    gen.eval()
    summary = {"steps": cfg.total_steps, "final": trace[-1], "seconds": time.perf_counter() - t0}
    return StageOutput(gen, trace, summary)


# -- Stage II ---------------------------------------------------------------------

def replay_quota(new_batch_size: int, num_new_classes: int, ratio) -> int:
    """Generated images per old class for one mini-batch."""
    g, n = ratio
    per_class_new = max(1, new_batch_size // max(1, num_new_classes))
    return max(1, (g * per_class_new) // n)


@torch.no_grad()
def build_balanced_batch(generator, old_classifier: IncrementalClassifier, new_images: torch.Tensor,
                         new_labels: torch.Tensor, ratio, rng: torch.Generator,
                         num_new_classes: Optional[int] = None, budget: int = 50) -> ReplayBatch:
    """Mix generated old-task images (exactly ``quota`` per old class) with a real batch.

    Generated images are drawn in chunks and accepted in draw order while their
    old-model pseudo-label still has room in its quota.
    """
    if new_images.shape[0] == 0:
        raise ConfigurationError("new batch is empty")
    num_old = old_classifier.num_classes
    if generator.covered_classes and generator.covered_classes != num_old:
        raise ConfigurationError(
            f"generator covers {generator.covered_classes} classes, old model has {num_old}"
        )
    k_new = num_new_classes or len(torch.unique(new_labels))
    quota = replay_quota(new_images.shape[0], k_new, ratio)
    need = quota * num_old
    max_draws = budget * need
    chunk = max(2 * need, 64)
    old_classifier.eval()
    counts = [0] * num_old
    accepted = []
    drawn = 0
    while drawn < max_draws and sum(counts) < need:
        m = min(chunk, max_draws - drawn)
        if m < 2:
            m = 2
        imgs = generate(generator, sample_noise(generator, m, rng))
        labels = old_classifier(imgs).argmax(dim=1).tolist()
        drawn += m
        for i, c in enumerate(labels):
            if counts[c] < quota:
                counts[c] += 1
                accepted.append(imgs[i])
    if sum(counts) < need:
        starving = {c: counts[c] for c in range(num_old) if counts[c] < quota}
        raise BalanceError(starving, quota, drawn)
    gen_images = torch.stack(accepted)
    images = torch.cat([gen_images, new_images.to(gen_images)])
    teacher_logits = old_classifier(images)
    n_gen = gen_images.shape[0]
    return ReplayBatch(
        images=images,
        teacher_logits=teacher_logits,
        labels=new_labels,
        partition={"generated": (0, n_gen), "real": (n_gen, images.shape[0])},
        pseudo_labels=teacher_logits[:n_gen].argmax(dim=1),
    )


def inherit_knowledge(old_classifier: IncrementalClassifier, generator, new_task: TaskSpec,
                      cfg: InheritanceConfig, head_seed: Optional[int] = None) -> StageOutput:
    """Train an expanded copy of ``old_classifier`` on the new task.

    Each step mixes a class-balanced generated batch (when ``cfg.replay``) with
    real new-task images and minimises
    ``(1 - lam4) * ce + lam4 * (gkd + nkd)``, the old model acting as a frozen teacher.
    """
    teacher = copy.deepcopy(old_classifier)
    freeze(teacher)
    num_old = teacher.num_classes
    if cfg.replay:
        if generator is None:
            raise ConfigurationError("replay enabled but no generator given")
        if generator.covered_classes != num_old:
            raise ConfigurationError(
                f"generator covers {generator.covered_classes} classes, old model has {num_old}"
            )
    head_seed = derive_seed(cfg.seed, "head") if head_seed is None else head_seed
    student = expand_head(old_classifier, new_task.num_classes, init_seed=head_seed)
    data = new_task.train
    labels = within_head_labels(new_task, data.labels)
    n = len(data)
    spe = steps_per_epoch(n, cfg.new_batch_size)
    opt, sched = _classifier_optimizer(student, cfg, spe)
    lam4 = lambda4(new_task.task_index, cfg.distill)
    T = cfg.distill.temperature
    replay_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "replay"))
    aug_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "augment"))
    dtype = _model_dtype(student)
    trace, step, t0 = [], 0, time.perf_counter()
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n, cfg.new_batch_size, cfg.seed, epoch):
            x_new = augment(data.images[idx], aug_rng, cfg.augment_pad, cfg.augment_flip).to(dtype)
            y_new = labels[idx]
            if cfg.replay:
                rb = build_balanced_batch(generator, teacher, x_new, y_new, cfg.replay_ratio, replay_rng,
                                          num_new_classes=new_task.num_classes, budget=cfg.rejection_budget)
                images, t_logits, real, gen_part = rb.images, rb.teacher_logits, rb.real, rb.generated
            else:
                images = x_new
                with torch.no_grad():
                    t_logits = teacher(images)
                real, gen_part = slice(0, images.shape[0]), None
            student.train()
            out = student(images)
            ce = cross_entropy_loss(out[real, num_old:], y_new)
            if cfg.use_nkd:
                nkd = kd_loss(t_logits[real], out[real, :num_old], T)
            else:
                nkd = torch.zeros((), dtype=dtype)
            if gen_part is not None:
                gkd = kd_loss(t_logits[gen_part], out[gen_part, :num_old], T)
            else:
                gkd = torch.zeros((), dtype=dtype)
            total, terms = inheritance_loss(ce, gkd, nkd, lam4)
            _check_finite("inheritance", step, total, terms)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sched.step()
            trace.append({"step": step, "epoch": epoch, **terms})
            step += 1
    student.eval()
    summary = {"steps": step, "lambda4": lam4, "final": trace[-1], "seconds": time.perf_counter() - t0}
    return StageOutput(student, trace, summary)


# -- baselines ----------------------------------------------------------------------

def train_baseline(old_classifier: IncrementalClassifier, new_task: TaskSpec, cfg: InheritanceConfig,
                   method: str, head_seed: Optional[int] = None) -> StageOutput:
    """Finetune (new-task cross-entropy only) or LwF (cross-entropy plus distillation on new data)."""
    if method not in ("finetune", "lwf"):
        raise ConfigurationError(f"unknown baseline {method!r}")
    teacher = freeze(copy.deepcopy(old_classifier))
    k_old = teacher.num_classes
    head_seed = derive_seed(cfg.seed, "head") if head_seed is None else head_seed
    model = expand_head(old_classifier, new_task.num_classes, init_seed=head_seed)
    labels = within_head_labels(new_task, new_task.train.labels)
    n = len(new_task.train)
    opt, sched = _classifier_optimizer(model, cfg, steps_per_epoch(n, cfg.new_batch_size))
    lam = lambda4(new_task.task_index, cfg.distill) if method == "lwf" else 0.0
    aug_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "augment"))
    dtype = _model_dtype(model)
    trace, step = [], 0
    for epoch in range(cfg.epochs):
        for idx in epoch_batches(n, cfg.new_batch_size, cfg.seed, epoch):
            x = augment(new_task.train.images[idx], aug_rng, cfg.augment_pad, cfg.augment_flip).to(dtype)
            model.train()
            logits = model(x)
            ce = cross_entropy_loss(logits[:, k_old:], labels[idx])
            if method == "lwf":
                with torch.no_grad():
                    soft = teacher(x)
                nkd = kd_loss(soft, logits[:, :k_old], cfg.distill.temperature)
                loss = (1 - lam) * ce + lam * nkd
                row = {"ce": ce.item(), "gkd": 0.0, "nkd": nkd.item()}
            else:
                loss = ce
                row = {"ce": ce.item(), "gkd": 0.0, "nkd": 0.0}
            _check_finite(method, step, loss, row)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            trace.append({"step": step, "epoch": epoch, **row, "lambda4": lam, "total": loss.item()})
            step += 1
    model.eval()
    return StageOutput(model, trace, {"steps": step, "lambda4": lam, "final": trace[-1]})


# -- method catalogue and sequence driver --------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """One row of the loss ablation ladder."""

    name: str
    replay: bool = False
    bn: bool = False
    div: bool = False
    nkd: bool = False
    joint: bool = False

    def validate(self):
        errors = []
        if self.div and not self.bn:
            errors.append("the diversity loss requires the BN alignment loss (ablation ladder: base, bn, bn+div)")
        if (self.bn or self.div) and not self.replay:
            errors.append("generator losses need replay enabled")
        if self.joint and (self.replay or self.nkd):
            errors.append("joint training takes no replay or distillation")
        return errors


METHODS = {
    "finetune": MethodSpec("finetune"),
    "lwf": MethodSpec("lwf", nkd=True),
    "lwf-gbase": MethodSpec("lwf-gbase", replay=True, nkd=True),
    "gbn": MethodSpec("gbn", replay=True, bn=True),
    "lwf-gbn": MethodSpec("lwf-gbn", replay=True, bn=True, nkd=True),
    "ours": MethodSpec("ours", replay=True, bn=True, div=True, nkd=True),
    "oracle": MethodSpec("oracle", joint=True),
}


@dataclass
class StageConfigs:
    initial: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    recording: RecordingConfig = field(default_factory=RecordingConfig)
    inheritance: InheritanceConfig = field(default_factory=InheritanceConfig)


@dataclass
class SequenceResult:
    checkpoints: list
    generators: list
    metrics: MetricsTable
    stages: list


def _direct(stage, task, fn):
    return fn()


def stage_settings(cfgs: StageConfigs, method: MethodSpec, seed: int, task: int):
    """Per-task recording and inheritance configs for ``method`` under run seed ``seed``."""
    w = cfgs.recording.weights
    weights = RecordingLossWeights(
        lambda1=w.lambda1,
        lambda2=w.lambda2 if method.bn else 0.0,
        lambda3=w.lambda3 if method.div else 0.0,
        pair_count=w.pair_count,
        div_space=w.div_space,
    )
    rec = replace(cfgs.recording, weights=weights, seed=derive_seed(seed, "record", task))
    inh = replace(cfgs.inheritance, replay=method.replay, use_nkd=method.nkd,
                  seed=derive_seed(seed, "inherit", task))
    return rec, inh


def run_sequence(initial_classifier: Optional[IncrementalClassifier], sequence: TaskSequence,
                 cfgs: StageConfigs, method: MethodSpec, seed: int, arch=None,
                 stage_hook: Callable = _direct) -> SequenceResult:
    """Learn every task of ``sequence`` in order and evaluate on all seen classes after each.

    ``initial_classifier`` is the trained task-1 model; when None it is trained
    here from ``arch``. ``stage_hook(stage, task, fn)`` wraps every stage so
    callers can cache or time it; it must return what ``fn()`` returns.
    """
    label_map = sequence.label_map()
    metrics = MetricsTable()
    stages = []
    if initial_classifier is None:
        if arch is None:
            raise ConfigurationError("need either an initial classifier or an arch to train one")
        init_cfg = replace(cfgs.initial, seed=derive_seed(seed, "initial"))
        out = stage_hook("initial", 0, lambda: train_initial(arch, sequence[0], init_cfg))
        stages.append(("initial", 0, out.summary))
        current = out.model
    else:
        current = initial_classifier
    checkpoints, generators = [current], [None]
    rec, pc = evaluate_task(current, sequence.seen_eval(0), [], list(sequence[0].class_set), label_map, seed, 0)
    metrics.add(rec, pc)
    for t in range(1, len(sequence)):
        task = sequence[t]
        old = list(sequence.seen_classes(t - 1))
        rec_cfg, inh_cfg = stage_settings(cfgs, method, seed, t)
        gen = None
        if method.joint:
            out = stage_hook("oracle", t, lambda: _train_joint(sequence, t, cfgs.initial, seed, current))
        else:
            if method.replay:
                prev = current
                gout = stage_hook("recording", t, lambda: record_knowledge(prev, rec_cfg))
                stages.append(("recording", t, gout.summary))
                gen = gout.model
            if method.replay:
                out = stage_hook("inheritance", t, lambda: inherit_knowledge(current, gen, task, inh_cfg))
            else:
                out = stage_hook(method.name, t, lambda: train_baseline(current, task, inh_cfg, method.name))
        stages.append((method.name, t, out.summary))
        current = out.model
        checkpoints.append(current)
        generators.append(gen)
        rec, pc = evaluate_task(current, sequence.seen_eval(t), old, list(task.class_set), label_map, seed, t)
        metrics.add(rec, pc)
    return SequenceResult(checkpoints, generators, metrics, stages)


def _train_joint(sequence: TaskSequence, t: int, cfg: ClassifierTrainConfig, seed: int, like) -> StageOutput:
    """Reference model trained from scratch on the union of tasks 0..t."""
    from .models import new_classifier

    label_map = sequence.label_map(t)
    data = LabeledSet.concat(sequence[i].train for i in range(t + 1))
    model = new_classifier(like.arch, sequence[0].num_classes, seed=derive_seed(seed, "oracle", t))
    for i in range(1, t + 1):
        model = expand_head(model, sequence[i].num_classes, init_seed=derive_seed(seed, "oracle-head", t, i),
                            inplace=True)
    model.to(_model_dtype(like))
    joint_cfg = replace(cfg, seed=derive_seed(seed, "oracle-train", t))
    return train_classifier(model, data, label_map.to_columns(data.labels), joint_cfg)
