"""Two-phase training: P1 pretraining (self-supervised and/or segmentation)
on class group A, P2 adaptation of a scheme-dependent parameter subset to
class group B, plus evaluation and the scheme/budget ablation grid."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import __version__
from .checkpoint import check_compatible, manifest_config, read_tensors, write_tensors
from .config import SCHEMES, ExperimentConfig
from .data import AugmentPolicy, Dataset, augment
from .freeze import (TrainableMask, apply_update, build_optimizer, checksum, freeze_policy, one_cycle,
                     registry)
from .metrics import EvalReport, aggregate, evaluate_volume
from .model import PUNet, upsample_scores
from .seghead import (PromptBatch, PromptStore, batch_prompts, binary_task, class_probabilities,
                      init_prompts, segment_scores, select_prompts)
from .selfsup import cpa_step, ema_update, feature_grid, make_views
from .supervise import class_weights, focal_loss, one_hot

log = logging.getLogger(__name__)

PLANS = ("joint", "seg", "self", "random")
HEAD_SCHEMES = ("fixed", "full_fixed")


class NumericError(FloatingPointError):
    """Non-finite loss; ``snapshot`` holds the diagnostics written to disk."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class PhasePlan:
    phase: str  # P1 | P2
    losses: frozenset
    prompts: bool
    classes: tuple[int, ...]
    scheme: str
    steps: int
    scheduler: str = "one_cycle"

    def __post_init__(self):
        if self.phase not in ("P1", "P2"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if not self.losses <= {"cpa", "focal"}:
            raise ValueError(f"unknown losses {sorted(self.losses)}")
        if self.phase == "P1" and "focal" in self.losses and not self.prompts:
            raise ValueError("P1 segmentation needs prompt insertion")
        if self.phase == "P2" and self.losses != frozenset({"focal"}):
            raise ValueError("P2 trains with the focal loss only")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @classmethod
    def p1(cls, variant: str, classes, steps: int) -> "PhasePlan":
        if variant not in PLANS:
            raise ValueError(f"unknown P1 variant {variant!r}; expected one of {PLANS}")
        losses = {"joint": {"cpa", "focal"}, "seg": {"focal"}, "self": {"cpa"}, "random": set()}[variant]
        steps = 0 if variant == "random" else steps
        return cls("P1", frozenset(losses), variant in ("joint", "seg"), tuple(classes), "full", steps)

    @classmethod
    def p2(cls, scheme: str, classes, steps: int) -> "PhasePlan":
        return cls("P2", frozenset({"focal"}), scheme not in HEAD_SCHEMES, tuple(classes), scheme, steps)


# ---------------------------------------------------------------- helpers


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def task_for(config: ExperimentConfig, cls: int | None) -> str:
    return binary_task(cls) if config.prompt_mode == "binary" else "multi"


def task_labels(mask: np.ndarray, classes) -> np.ndarray:
    """Labels outside ``classes`` become background."""
    return np.where(np.isin(mask, classes[1:]), mask, 0)


def make_store(model: PUNet, config: ExperimentConfig, classes, seed: int) -> PromptStore:
    store = PromptStore.for_model(model)
    mode = "binary" if config.prompt_mode == "fixed" else config.prompt_mode
    return init_prompts(store, classes, mode, seed)


def task_classes(store: PromptStore, task: str) -> list[int]:
    return list(store.tasks[task].classes)


def weights_for(ds: Dataset, idx: np.ndarray, classes) -> Tensor:
    masks = task_labels(ds.masks[idx], classes)
    return torch.tensor(class_weights(masks, classes), dtype=torch.float32)


def set_bn_trainability(model: nn.Module) -> None:
    """Batch norms whose affine parameters are frozen also keep their running
    statistics (eval mode), so a frozen backbone is frozen in behaviour too."""
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d) and not m.weight.requires_grad:
            m.eval()


def _state(module: nn.Module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _load(module: nn.Module, tensors: dict[str, Tensor], prefix: str) -> None:
    sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(sub)


def _snapshot(step: int, logs: list[dict], model: nn.Module, out: Path | None) -> dict:
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    snap = {"step": step, "recent": logs[-5:], "non_finite_params": bad}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(json.dumps(snap, indent=1, default=float))
    return snap


def _check_finite(loss: Tensor, step: int, logs: list[dict], model: nn.Module, out: Path | None) -> None:
    if not torch.isfinite(loss):
        snap = _snapshot(step, logs, model, out)
        raise NumericError(f"non-finite loss at step {step}", snap)


@contextlib.contextmanager
def _numeric_guard(step: int, logs: list[dict], model: nn.Module, out: Path | None):
    """Turns a non-finite guard tripped inside the forward pass into a
    ``NumericError`` with the same diagnostics as a non-finite loss."""
    try:
        yield
    except NumericError:
        raise
    except FloatingPointError as exc:
        raise NumericError(f"{exc} at step {step}", _snapshot(step, logs, model, out)) from exc


# ---------------------------------------------------------------- P1


@dataclass
class Pretrained:
    config: ExperimentConfig
    plan: PhasePlan
    student: PUNet
    teacher: PUNet | None
    store: PromptStore
    logs: list[dict] = field(default_factory=list)

    def tensors(self) -> dict[str, Tensor]:
        out = _state(self.student, "student")
        if self.teacher is not None:
            out.update(_state(self.teacher, "teacher"))
        out.update(_state(self.store, "prompts"))
        return out

    def save(self, path) -> Path:
        meta = {"plan": _plan_dict(self.plan), "tasks": {n: task_classes(self.store, n) for n in self.store.task_names()},
                "teacher": self.teacher is not None}
        return write_tensors(path, self.tensors(), self.config, "p1", meta)


def _plan_dict(plan: PhasePlan) -> dict:
    d = asdict(plan)
    d["losses"] = sorted(plan.losses)
    return d


def _collate_views(triplets, which):
    views = [t.teacher if which == "teacher" else t.students[which] for t in triplets]
    img = torch.from_numpy(np.stack([v.image for v in views]))[:, None]
    grid = torch.from_numpy(np.stack([feature_grid(v.grid) for v in views]))
    mask = None if views[0].mask is None else np.stack([v.mask for v in views])
    return img, grid, mask


def _prompt_batch(store: PromptStore, tasks: list[str]) -> PromptBatch:
    return batch_prompts([select_prompts(store, t) for t in tasks])


def _detached(pb: PromptBatch) -> PromptBatch:
    from .attention import SlotPrompt

    slots = [SlotPrompt(s.tokens.detach(), s.bias_emb.detach(), s.valid) for s in pb.slots]
    return PromptBatch(slots, pb.seg.detach(), pb.class_valid, pb.classes)


def prompt_focal(F_s: Tensor, pb: PromptBatch, labels: np.ndarray, alphas: Tensor, config: ExperimentConfig) -> Tensor:
    scores = upsample_scores(segment_scores(F_s, pb, config.tau_agg), labels.shape[-2:])
    probs = class_probabilities(scores, pb.class_valid)
    target = torch.stack([one_hot(torch.from_numpy(task_labels(l, c)), c) for l, c in zip(labels, pb.classes)])
    return focal_loss(probs, target.to(probs.dtype), config.focal_gamma, alphas)


def pretrain_p1(config: ExperimentConfig, ds: Dataset, variant: str, steps: int | None = None,
                out: str | os.PathLike | None = None, log_every: int = 0) -> Pretrained:
    """Train a student (and EMA teacher) on group A of ``ds``'s training split."""
    classes = ds.spec.group_a
    plan = PhasePlan.p1(variant, classes, config.steps_p1 if steps is None else steps)
    rng = seed_everything(config.seed)
    student = PUNet(config)
    store = make_store(student, config, classes, config.seed)
    teacher = None
    if "cpa" in plan.losses:
        teacher = copy.deepcopy(student).eval()
        teacher.requires_grad_(False)
    result = Pretrained(config, plan, student, teacher, store)
    if plan.steps == 0:
        return result
    out = Path(out) if out is not None else None

    train_idx = ds.indices("train")
    tasks = store.task_names()
    alphas = {t: weights_for(ds, train_idx, task_classes(store, t)) for t in tasks}
    params = registry(student, store)
    mask = TrainableMask({n: n.startswith("model.") or plan.prompts for n in params}, "p1")
    opt = build_optimizer(params, mask, config.lr_net, config.lr_prompt, config.weight_decay, "adamw")
    sched = one_cycle(opt, plan.steps)
    student.train()
    for step in range(plan.steps):
        with _numeric_guard(step, result.logs, student, out):
            idx = rng.choice(train_idx, size=config.batch_size, replace=True)
            triplets = [make_views(ds.images[i], config, rng, ds.masks[i]) for i in idx]
            pb = None
            if plan.prompts:
                tasks_b = [task_for(config, int(rng.choice(classes))) for _ in idx]
                pb = _prompt_batch(store, tasks_b)
            entry = {"step": step}
            loss = torch.zeros(())
            student_F, student_grids = [], []
            for n in (0, 1):
                img, grid, labels = _collate_views(triplets, n)
                F_s = student(img, pb)
                student_F.append(F_s)
                student_grids.append(grid)
                if "focal" in plan.losses:
                    alpha = torch.stack([alphas[t] for t in tasks_b])
                    fl = prompt_focal(F_s, pb, labels, alpha, config) / 2
                    loss = loss + config.loss_weight_seg * fl
                    entry["focal"] = entry.get("focal", 0.0) + fl.item()
            if "cpa" in plan.losses:
                img_t, grid_t, _ = _collate_views(triplets, "teacher")
                with torch.no_grad():
                    F_t = teacher(img_t, _detached(pb) if pb is not None else None)
                cpa = cpa_step(F_t, grid_t, student_F, student_grids, config, rng).loss
                loss = loss + config.loss_weight_cpa * cpa
                entry["cpa"] = cpa.item()
            entry["loss"] = loss.item()
            result.logs.append(entry)
            _check_finite(loss, step, result.logs, student, out)
            loss.backward()
            apply_update(opt, sched)
            if teacher is not None:
                ema_update(teacher, student, config.ema_momentum)
            if log_every and step % log_every == 0:
                log.info("P1 %s step %d %s", variant, step, entry)
    student.eval()
    return result


def load_pretrained(path, config: ExperimentConfig | None = None) -> Pretrained:
    tensors, manifest = read_tensors(path)
    saved = manifest_config(manifest)
    if config is not None:
        check_compatible(saved, config)
    cfg = config or saved
    meta = manifest["meta"]
    plan_d = dict(meta["plan"])
    plan_d["losses"] = frozenset(plan_d["losses"])
    plan_d["classes"] = tuple(plan_d["classes"])
    plan = PhasePlan(**plan_d)
    student = PUNet(cfg)
    _load(student, tensors, "student")
    teacher = None
    if meta.get("teacher"):
        teacher = PUNet(cfg)
        _load(teacher, tensors, "teacher")
    store = PromptStore.for_model(student)
    for name, cls in meta["tasks"].items():
        store.add_task(name, cls)
    _load(store, tensors, "prompts")
    student.eval()
    return Pretrained(cfg, plan, student, teacher, store)


# ---------------------------------------------------------------- P2


@dataclass
class Adapted:
    config: ExperimentConfig
    plan: PhasePlan
    model: PUNet
    store: PromptStore
    mask: TrainableMask
    logs: list[dict]
    frozen_before: str
    frozen_after: str
    trainable_before: str
    trainable_after: str
    subjects: list[int]

    def pretrain_tasks(self) -> list[str]:
        b = set(self.plan.classes)
        return [n for n in self.store.task_names() if not set(task_classes(self.store, n)[1:]) <= b]

    def save(self, path) -> Path:
        tensors = _state(self.model, "model")
        tensors.update(_state(self.store, "prompts"))
        meta = {"plan": _plan_dict(self.plan), "tasks": {n: task_classes(self.store, n) for n in self.store.task_names()},
                "adapters": any(b.adapter is not None for b in self.model.blocks),
                "head": None if self.model.head is None else self.model.head.out_features,
                "subjects": self.subjects, "frozen_checksum": self.frozen_after}
        return write_tensors(path, tensors, self.config, "p2", meta)


def budget_subjects(ds: Dataset, budget: int | None, seed: int) -> list[int]:
    """``budget`` training subjects drawn with a pinned seed; ``None`` = all."""
    train = list(ds.splits["train"])
    if budget is None or budget >= len(train):
        return train
    rng = np.random.default_rng([seed, 7919])
    return sorted(int(s) for s in rng.choice(train, size=budget, replace=False))


def _p2_batch(ds: Dataset, idx: np.ndarray, config: ExperimentConfig, rng: np.random.Generator):
    policy = AugmentPolicy.weak()
    t = config.teacher_fov
    views = []
    for i in idx:
        img = ds.images[i]
        off = (int(rng.integers(0, img.shape[0] - t + 1)), int(rng.integers(0, img.shape[1] - t + 1)))
        views.append(augment(img, ds.masks[i], off, t, policy, rng))
    return torch.from_numpy(np.stack([v.image for v in views]))[:, None], np.stack([v.mask for v in views])


def head_loss(model: PUNet, F_s: Tensor, labels: np.ndarray, classes, alpha: Tensor, gamma: float) -> Tensor:
    logits = upsample_scores(model.head(F_s), labels.shape[-2:])
    probs = torch.softmax(logits, dim=-1)
    target = one_hot(torch.from_numpy(task_labels(labels, classes)), classes)
    return focal_loss(probs, target.to(probs.dtype), gamma, alpha)


def adapt_p2(pre: Pretrained, ds: Dataset, scheme: str, budget: int | None = None, steps: int | None = None,
             seed: int | None = None, out: str | os.PathLike | None = None) -> Adapted:
    """Adapt a copy of the pretrained student to group B under ``scheme``."""
    config = pre.config
    classes_b = tuple(ds.spec.group_b)
    if set(classes_b) & set(pre.plan.classes):
        raise ValueError("adaptation classes overlap the pretraining classes")
    plan = PhasePlan.p2(scheme, classes_b, config.steps_p2 if steps is None else steps)
    seed = config.seed if seed is None else seed
    rng = seed_everything(seed)
    model = copy.deepcopy(pre.student)
    store = copy.deepcopy(pre.store)
    mode = "binary" if config.prompt_mode == "fixed" else config.prompt_mode
    gen = torch.Generator().manual_seed(seed + 1)
    if mode == "binary":
        for c in classes_b:
            store.add_task(binary_task(c), [0, c], gen)
    else:
        store.add_task("multi_b", [0, *classes_b], gen)
    head_classes = [0, *classes_b]
    if scheme == "adapter":
        model.add_adapters()
    if scheme in HEAD_SCHEMES:
        model.add_head(len(head_classes))

    params = registry(model, store)
    mask = freeze_policy(model, store, scheme)
    frozen_before = checksum(params, mask.frozen())
    trainable_before = checksum(params, mask.trainable())
    opt = build_optimizer(params, mask, config.lr_net_p2, config.lr_prompt_p2, 0.0, "adam")
    sched = one_cycle(opt, plan.steps) if opt is not None else None

    subjects = budget_subjects(ds, budget, seed)
    train_idx = ds.indices("train", subjects)
    b_tasks = [binary_task(c) for c in classes_b] if mode == "binary" else ["multi_b"]
    alphas = {t: weights_for(ds, train_idx, task_classes(store, t)) for t in b_tasks}
    head_alpha = weights_for(ds, train_idx, head_classes)
    model.train()
    set_bn_trainability(model)
    logs: list[dict] = []
    out = Path(out) if out is not None else None
    for step in range(plan.steps if opt is not None else 0):
        with _numeric_guard(step, logs, model, out):
            idx = rng.choice(train_idx, size=config.batch_size, replace=True)
            img, labels = _p2_batch(ds, idx, config, rng)
            if plan.prompts:
                tasks_b = [b_tasks[int(rng.integers(len(b_tasks)))] for _ in idx]
                pb = _prompt_batch(store, tasks_b)
                F_s = model(img, pb)
                alpha = torch.stack([alphas[t] for t in tasks_b])
                loss = prompt_focal(F_s, pb, labels, alpha, config)
            else:
                F_s = model(img)
                loss = head_loss(model, F_s, labels, head_classes, head_alpha, config.focal_gamma)
            logs.append({"step": step, "focal": loss.item()})
            _check_finite(loss, step, logs, model, out)
            loss.backward()
            apply_update(opt, sched)
    model.eval()
    frozen_after = checksum(params, mask.frozen())
    if frozen_after != frozen_before:
        raise RuntimeError(f"scheme {scheme!r} modified frozen parameters")
    return Adapted(config, plan, model, store, mask, logs, frozen_before, frozen_after, trainable_before,
                   checksum(params, mask.trainable()), subjects)


def save_prompts(adapted: Adapted, path) -> Path:
    """Prompt-only checkpoint: the trainable prompt state of the adapted tasks."""
    tasks = [n for n in adapted.store.task_names() if n not in adapted.pretrain_tasks()]
    tensors = {k: v for k, v in _state(adapted.store, "prompts").items() if k.split(".")[2] in tasks}
    meta = {"tasks": {n: task_classes(adapted.store, n) for n in tasks}}
    return write_tensors(path, tensors, adapted.config, "prompts", meta)


def load_adapted(path, config: ExperimentConfig | None = None) -> Adapted:
    tensors, manifest = read_tensors(path)
    if manifest["kind"] != "p2":
        raise ValueError(f"expected an adapted checkpoint, got kind {manifest['kind']!r}")
    saved = manifest_config(manifest)
    if config is not None:
        check_compatible(saved, config)
    meta = manifest["meta"]
    plan_d = dict(meta["plan"])
    plan_d["losses"] = frozenset(plan_d["losses"])
    plan_d["classes"] = tuple(plan_d["classes"])
    plan = PhasePlan(**plan_d)
    model = PUNet(saved)
    if meta["adapters"]:
        model.add_adapters()
    if meta["head"]:
        model.add_head(meta["head"])
    _load(model, tensors, "model")
    store = PromptStore.for_model(model)
    for name, cls in meta["tasks"].items():
        store.add_task(name, cls)
    _load(store, tensors, "prompts")
    model.eval()
    mask = freeze_policy(model, store, plan.scheme)
    return Adapted(saved, plan, model, store, mask, [], meta["frozen_checksum"], meta["frozen_checksum"], "", "",
                   list(meta["subjects"]))


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(adapted: Adapted, images: np.ndarray, cls: int | None = None, batch: int = 16) -> np.ndarray:
    """Label maps for ``images``. Prompt schemes with binary prompts answer one
    class at a time (``cls``); head schemes and multiclass prompts answer all."""
    model, store, config = adapted.model, adapted.store, adapted.config
    out = []
    for s in range(0, len(images), batch):
        img = torch.from_numpy(images[s : s + batch])[:, None]
        if not adapted.plan.prompts:
            F_s = model(img)
            logits = upsample_scores(model.head(F_s), img.shape[-2:])
            classes = [0, *adapted.plan.classes]
        else:
            task = binary_task(cls) if "multi_b" not in store.tasks else "multi_b"
            pb = _prompt_batch(store, [task] * len(img))
            F_s = model(img, pb)
            logits = upsample_scores(segment_scores(F_s, pb, config.tau_agg), img.shape[-2:])
            classes = pb.classes[0]
        lab = logits.argmax(dim=-1).numpy()
        out.append(np.asarray(classes)[lab])
    return np.concatenate(out).astype(np.uint8)


def evaluate(adapted: Adapted, ds: Dataset, run: str, split: str = "test") -> EvalReport:
    classes = adapted.plan.classes
    per_class_prompts = adapted.plan.prompts and "multi_b" not in adapted.store.tasks
    rows = []
    for sid in ds.splits[split]:
        idx = ds.indices(split, [sid])
        gt = ds.masks[idx]
        if per_class_prompts:
            preds = {c: predict(adapted, ds.images[idx], c) for c in classes}
            for c in classes:
                rows += evaluate_volume(run, sid, preds[c], gt, [c])
        else:
            rows += evaluate_volume(run, sid, predict(adapted, ds.images[idx]), gt, classes)
    return aggregate(run, rows)


# ---------------------------------------------------------------- ablation


def ablate(pre: Pretrained, ds: Dataset, schemes, budgets, steps: int | None = None,
           prefix: str = "") -> list[EvalReport]:
    """One adaptation and evaluation per ``(scheme, budget)`` cell."""
    schemes = list(schemes)
    bad = [s for s in schemes if s not in SCHEMES]
    if bad:
        raise ValueError(f"unknown scheme {bad[0]!r}")
    reports = []
    for scheme in schemes:
        for budget in budgets:
            tag = f"{prefix}{scheme}@{'all' if budget is None else budget}"
            adapted = adapt_p2(pre, ds, scheme, budget, steps)
            reports.append(evaluate(adapted, ds, tag))
            log.info("%s DSC %.2f", tag, reports[-1].summary()["mean"])
    return reports


# ---------------------------------------------------------------- provenance


def code_hash() -> str:
    """Content hash of the package sources, salted with the version string."""
    h = hashlib.sha256(__version__.encode())
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_run_json(out: str | os.PathLike, command: str, config: ExperimentConfig, extra: dict | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config_digest": config.digest(),
        "code_hash": code_hash(),
        "version": __version__,
        "seed": config.seed,
        "torch": torch.__version__,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(record, indent=1, default=str))
    return out / "run.json"


def finite(x: float) -> bool:
    return not (math.isnan(x) or math.isinf(x))
