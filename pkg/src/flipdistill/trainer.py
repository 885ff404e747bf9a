"""Training loop, evaluation metrics, checkpoint selection, and the
finite-difference gradient check.

The recipe: per step, forward the frozen teacher and the student, build
the batch similarity matrices, apply the noise filter, combine the three
losses, backprop, clip every gradient component to the configured range,
and take a decoupled-weight-decay optimizer step under a linear-warmup
learning-rate schedule.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels, losses, models
from . import tensor as T
from .data import make_batches
from .losses import (BatchMatrices, ConfigError, LossBreakdown,
                     TrainingStepError, angular, cosine_matrix,
                     distillation_loss, filter_mask, mcl_loss,
                     supervised_loss, total_loss)
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "split", "acc", "f1", "auc",
                  "l_sup", "l_dist", "l_mcl", "total", "lr"]


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    warmup_ratio: float = 0.05
    weight_decay: float = 0.1
    grad_clip_lo: float = -1.0
    grad_clip_hi: float = 1.0
    batch_size: int = 16
    epochs: int = 3
    m_c: float = 0.06
    theta: float = 0.5
    w_dist: float = 0.1
    w_mcl: float = 0.1
    seed: int = 0
    disable_mcl: bool = False
    disable_dist: bool = False
    disable_filter: bool = False
    disable_sup: bool = False         # gradcheck-only: isolate the distillation losses
    optimizer: str = "adamw"          # adamw | sgd
    margin_from_pair: bool = True
    same_cluster_positive: bool = True
    teacher_prefit_epochs: int = 3
    teacher_lr: float = 1e-2
    teacher_neg_margin: float = 0.2
    teacher_pos_target: float = 1.0
    teacher_prefit_max_examples: int = 2500


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    auc: float            # None when the eval set is single-class
    breakdown: LossBreakdown = None
    step: int = 0
    split: str = "dev"


@dataclass
class CheckpointRecord:
    step: int
    dev: MetricsReport
    test: MetricsReport
    path: str = ""


@dataclass
class TrainResult:
    checkpoints: list
    metric_rows: list
    aborted: bool = False


# -- metrics -------------------------------------------------------------

def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_score(scores, labels):
    """AUC by the rank statistic, with half-credit for ties.

    Returns None (with a warning) when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    npos = int((labels == 1).sum())
    nneg = len(labels) - npos
    if npos == 0 or nneg == 0:
        log.warning("auc_score: single-class eval set, AUC undefined")
        return None
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def f1_score(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def predict_scores(model, examples):
    """p_yes for each example, evaluation mode."""
    out = np.empty(len(examples))
    for i, ex in enumerate(examples):
        enc = model.encode_pair(ex.text_i, ex.text_j, training=False)
        out[i] = models.p_yes(enc.logits).item()
    return out


def evaluate(model, examples, step=0, split="dev", threshold=0.5):
    scores = predict_scores(model, examples)
    labels = np.array([ex.label for ex in examples])
    preds = (scores >= threshold).astype(int)
    return MetricsReport(
        accuracy=float((preds == labels).mean()),
        f1=f1_score(preds, labels),
        auc=auc_score(scores, labels),
        step=step, split=split,
    )


# -- optimizer -----------------------------------------------------------

class Optimizer:
    """AdamW or SGD over a named parameter dict, with elementwise
    gradient clipping applied before each update."""

    def __init__(self, params, cfg: TrainConfig):
        if cfg.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.state = {
            n: (np.zeros(p.size), np.zeros(p.size)) for n, p in params.items()
        } if cfg.optimizer == "adamw" else {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        self.t += 1
        cfg = self.cfg
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.reshape(-1)
            kernels.clip_values(g, cfg.grad_clip_lo, cfg.grad_clip_hi)
            flat = p.data.reshape(-1)
            if cfg.optimizer == "adamw":
                m, v = self.state[name]
                kernels.adamw_step(flat, g, m, v, self.t, lr,
                                   0.9, 0.999, 1e-8, cfg.weight_decay)
            else:
                kernels.sgd_step(flat, g, lr, cfg.weight_decay)


def warmup_lr(step, total_steps, base_lr, warmup_ratio):
    """Linear warmup to base_lr, constant afterwards."""
    warmup_steps = max(1, math.ceil(warmup_ratio * total_steps))
    return base_lr * min(1.0, (step + 1) / warmup_steps)


# -- batch loss ----------------------------------------------------------

def teacher_batch_reps(teacher, batch):
    """Frozen-teacher representations as plain arrays (no tape)."""
    rs_i = np.stack([teacher.encode(ex.text_i).data for ex in batch.examples])
    rs_j = np.stack([teacher.encode(ex.text_j).data for ex in batch.examples])
    return rs_i, rs_j


def compute_batch_loss(model, teacher_reps, batch, cfg: TrainConfig,
                       training=False, rng=None):
    """Forward the student on one batch and assemble the total loss.

    teacher_reps is (rs_i, rs_j) or None when both distillation losses
    are off. Returns (total Tensor, LossBreakdown).
    """
    need_teacher = not (cfg.disable_dist and cfg.disable_mcl)
    p_list, ri_list, rj_list = [], [], []
    for ex in batch.examples:
        enc = model.encode_pair(ex.text_i, ex.text_j, training=training, rng=rng)
        p_list.append(models.p_yes(enc.logits))
        ri_list.append(enc.r_i)
        rj_list.append(enc.r_j)

    labels = np.array([ex.label for ex in batch.examples], dtype=np.float64)
    if cfg.disable_sup:
        l_sup = Tensor(0.0)
    else:
        l_sup = supervised_loss(T.stack(p_list), labels)

    l_dist = Tensor(0.0)
    l_mcl = Tensor(0.0)
    filtered = 0
    if need_teacher:
        rs_i, rs_j = teacher_reps
        alpha_s = cosine_matrix(rs_i, rs_j).data
        alpha_l = cosine_matrix(T.stack(ri_list), T.stack(rj_list))
        if cfg.disable_filter:
            phi = np.ones_like(alpha_s)
        else:
            phi = filter_mask(alpha_s, batch.y, cfg.theta)
        filtered = int(phi.size - phi.sum())
        if not cfg.disable_dist:
            l_dist = distillation_loss(BatchMatrices(
                alpha_s=alpha_s, alpha_l=alpha_l, y=batch.y, phi=phi))
        if not cfg.disable_mcl:
            l_mcl = mcl_loss(angular(alpha_l), angular(alpha_s), phi, batch.y,
                             m_c=cfg.m_c, margin_from_pair=cfg.margin_from_pair)
    return total_loss(l_sup, l_dist, l_mcl,
                      w_dist=0.0 if cfg.disable_dist else cfg.w_dist,
                      w_mcl=0.0 if cfg.disable_mcl else cfg.w_mcl,
                      filtered_count=filtered)


# -- teacher pre-fit -----------------------------------------------------

def prefit_teacher(teacher, examples, cfg: TrainConfig):
    """Short contrastive fit of the teacher on the training split, then
    freeze it.

    The objective is a cosine-embedding hinge over all in-batch pairs:
    matched pairs are pulled up to teacher_pos_target, unmatched in-batch
    pairs are pushed below teacher_neg_margin. Unlike a purely relative
    objective this shapes *absolute* cosines, which the downstream
    dual-threshold filter compares against theta. Keeping the positive
    target below 1 leaves the teacher's positive angles non-degenerate,
    so the angular margin they induce downstream stays meaningful.
    """
    params = teacher.parameters()
    opt_cfg = TrainConfig(optimizer="adamw", weight_decay=0.0,
                          grad_clip_lo=cfg.grad_clip_lo, grad_clip_hi=cfg.grad_clip_hi)
    opt = Optimizer(params, opt_cfg)
    subset = examples[:cfg.teacher_prefit_max_examples]
    for epoch in range(cfg.teacher_prefit_epochs):
        batches = make_batches(subset, cfg.batch_size, seed=cfg.seed * 1000 + epoch,
                               same_cluster_positive=cfg.same_cluster_positive)
        for batch in batches:
            ri = T.stack([teacher.encode(ex.text_i) for ex in batch.examples])
            rj = T.stack([teacher.encode(ex.text_j) for ex in batch.examples])
            sim = cosine_matrix(ri, rj)
            pos_mask = (batch.y == 1).astype(np.float64)
            neg_mask = (batch.y == 0).astype(np.float64)
            n_pos, n_neg = pos_mask.sum(), neg_mask.sum()
            loss = Tensor(0.0)
            if n_pos:
                loss = loss + T.reduce_sum(
                    Tensor(pos_mask) * T.relu(cfg.teacher_pos_target - sim)) * (1.0 / n_pos)
            if n_neg:
                loss = loss + T.reduce_sum(
                    Tensor(neg_mask) * T.relu(sim - cfg.teacher_neg_margin)) * (1.0 / n_neg)
            opt.zero_grad()
            loss.backward()
            opt.step(cfg.teacher_lr)
    teacher.freeze()


# -- training ------------------------------------------------------------

def _metric_row(step, split, report=None, breakdown=None, lr=""):
    row = {c: "" for c in METRIC_COLUMNS}
    row["step"] = step
    row["split"] = split
    if report is not None:
        row["acc"] = f"{report.accuracy:.6f}"
        row["f1"] = f"{report.f1:.6f}"
        row["auc"] = "" if report.auc is None else f"{report.auc:.6f}"
    if breakdown is not None:
        row["l_sup"] = f"{breakdown.l_sup:.8f}"
        row["l_dist"] = f"{breakdown.l_dist:.8f}"
        row["l_mcl"] = f"{breakdown.l_mcl:.8f}"
        row["total"] = f"{breakdown.total:.8f}"
    if lr != "":
        row["lr"] = f"{lr:.10g}"
    return row


def write_metric_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def train(model, teacher, train_examples, dev_examples, test_examples,
          cfg: TrainConfig, model_cfg, run_dir=None):
    """Full optimization run. Returns a TrainResult whose checkpoint
    records carry dev and test metrics for top-k selection.

    A non-finite loss aborts the run; checkpoints already written stay
    on disk.
    """
    need_teacher = not (cfg.disable_dist and cfg.disable_mcl)
    if need_teacher and teacher is None:
        raise ConfigError("teacher required unless both distillation losses are disabled")
    if need_teacher and not teacher.frozen:
        raise ConfigError("teacher must be frozen before student training")

    params = model.trainable_parameters()
    opt = Optimizer(params, cfg)
    drop_rng = np.random.default_rng(cfg.seed + 7919)

    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    checkpoints = []
    rows = []

    def checkpoint(step, last_breakdown=None, lr=""):
        dev = evaluate(model, dev_examples, step=step, split="dev")
        test = evaluate(model, test_examples, step=step, split="test")
        path = ""
        if ckpt_dir is not None:
            path = os.path.join(ckpt_dir, f"step{step:06d}.ckpt")
            models.save_checkpoint(path, model, model_cfg, {"step": step})
        checkpoints.append(CheckpointRecord(step=step, dev=dev, test=test, path=path))
        rows.append(_metric_row(step, "dev", report=dev, breakdown=last_breakdown, lr=lr))
        rows.append(_metric_row(step, "test", report=test, breakdown=last_breakdown, lr=lr))

    checkpoint(0)

    n_batches = len(train_examples) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    step = 0
    aborted = False
    try:
        for epoch in range(cfg.epochs):
            batches = make_batches(train_examples, cfg.batch_size,
                                   seed=cfg.seed * 1000 + epoch,
                                   same_cluster_positive=cfg.same_cluster_positive)
            breakdown = None
            for batch in batches:
                t_reps = teacher_batch_reps(teacher, batch) if need_teacher else None
                lr = warmup_lr(step, total_steps, cfg.learning_rate, cfg.warmup_ratio)
                total, breakdown = compute_batch_loss(
                    model, t_reps, batch, cfg, training=True, rng=drop_rng)
                opt.zero_grad()
                total.backward()
                opt.step(lr)
                step += 1
            rows.append(_metric_row(step, "train", breakdown=breakdown, lr=lr))
            checkpoint(step, last_breakdown=breakdown, lr=lr)
    except TrainingStepError as e:
        log.error("training aborted at step %d: %s", step, e)
        aborted = True

    if run_dir is not None:
        write_metric_log(rows, os.path.join(run_dir, "metrics.csv"))
    result = TrainResult(checkpoints=checkpoints, metric_rows=rows, aborted=aborted)
    if aborted:
        raise TrainingStepError(
            f"aborted at step {step}; last good checkpoint at step "
            f"{checkpoints[-1].step if checkpoints else 'none'}")
    return result


# -- checkpoint selection ------------------------------------------------

def select_and_average_checkpoints(records, k=5):
    """Top-k checkpoints by dev F1; arithmetic mean of their test metrics."""
    if not records:
        raise ConfigError("no checkpoints recorded")
    if len(records) < k:
        log.warning("only %d checkpoints recorded, using all (k=%d)", len(records), k)
        k = len(records)
    best = sorted(records, key=lambda r: (-r.dev.f1, r.step))[:k]
    aucs = [r.test.auc for r in best if r.test.auc is not None]
    return MetricsReport(
        accuracy=float(np.mean([r.test.accuracy for r in best])),
        f1=float(np.mean([r.test.f1 for r in best])),
        auc=float(np.mean(aucs)) if aucs else None,
        step=best[0].step,
        split="test-avg",
    )


# -- gradient check ------------------------------------------------------

def grad_check(model, teacher, batch, cfg: TrainConfig, h=1e-5, n_coords=200, seed=0):
    """Max relative error between tape gradients and central finite
    differences over a sampled subset of LoRA parameter coordinates.

    Dropout must be off (training=False keeps it off here).
    """
    need_teacher = not (cfg.disable_dist and cfg.disable_mcl)
    t_reps = teacher_batch_reps(teacher, batch) if need_teacher else None

    def loss_value():
        total, _ = compute_batch_loss(model, t_reps, batch, cfg, training=False)
        return total

    total = loss_value()
    for p in model.trainable_parameters().values():
        p.grad = None
    total.backward()

    params = list(model.trainable_parameters().items())
    coords = []
    rng = np.random.default_rng(seed)
    for _ in range(n_coords):
        name, p = params[rng.integers(len(params))]
        coords.append((name, p, int(rng.integers(p.size))))

    max_rel = 0.0
    for name, p, idx in coords:
        flat = p.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = loss_value().item()
        flat[idx] = orig - h
        f_minus = loss_value().item()
        flat[idx] = orig
        fd = (f_plus - f_minus) / (2 * h)
        ad = p.grad.reshape(-1)[idx]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


# -- histogram -----------------------------------------------------------

@dataclass
class ScoreHistogram:
    edges: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray
    separation: float     # mean positive score minus mean negative score

    def rows(self):
        out = []
        for i in range(len(self.pos_counts)):
            out.append((self.edges[i], self.edges[i + 1],
                        int(self.pos_counts[i]), int(self.neg_counts[i])))
        return out


def export_score_histogram(model, examples, bins=20):
    scores = predict_scores(model, examples)
    labels = np.array([ex.label for ex in examples])
    edges = np.linspace(0.0, 1.0, bins + 1)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    pos_counts, _ = np.histogram(pos, bins=edges)
    neg_counts, _ = np.histogram(neg, bins=edges)
    sep = float(pos.mean() - neg.mean()) if len(pos) and len(neg) else float("nan")
    return ScoreHistogram(edges=edges, pos_counts=pos_counts,
                          neg_counts=neg_counts, separation=sep)


def write_histogram_csv(hist, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "pos_count", "neg_count"])
        for lo, hi, p, n in hist.rows():
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", p, n])
