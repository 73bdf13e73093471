"""
Dense, static-incremental, DPF and DCIL training over a shared SGD optimizer.

Trunk-weight gradient routing per trainer:

* dense / DPF: the P-path gradient (wrt the masked view) is applied to every
  real weight; for DPF this is the straight-through update of pruned entries.
* static: the P-path gradient is applied to active weights only; pruned
  weights, and their momentum, stay frozen.
* DCIL: ``mask * g_P + (1 - mask) * g_S`` where ``g_S`` comes from the S
  path (full weights, own batch norm and head) on the same minibatch.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DCIL, DENSE, DPF, STATIC, OptimizerConfig, TrainConfig, dump_config, parse_config, same_training
from .data import BatchIterator, Dataset, augment, epoch_rng
from .errors import ConfigError, NumericalError
from .metrics import RunRecord, SawtoothProbe, evaluate, sparsity_audit
from .model import ARCHS, P, S, DualPathNetwork, GradSet, build
from .pruning import compute_masks, apply_masks, should_refresh, sparsity_at

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- optimizer

def sgd_update(param: np.ndarray, grad: np.ndarray, buf: np.ndarray | None, lr: float,
               cfg: OptimizerConfig, active: np.ndarray | None = None) -> None:
    """In-place SGD step with L2 weight decay folded into the gradient.

    With ``active`` (boolean), entries outside it keep both their value and
    their momentum.
    """
    d = grad + cfg.weight_decay * param if cfg.weight_decay else grad.copy()
    if cfg.momentum:
        if active is None:
            buf *= cfg.momentum
            buf += d
        else:
            np.copyto(buf, cfg.momentum * buf + d, where=active)
        step = d + cfg.momentum * buf if cfg.nesterov else buf
    else:
        step = d
    if active is None:
        param -= lr * step
    else:
        param -= lr * np.where(active, step, 0)


class SGD:
    """Momentum buffers keyed by parameter id; one buffer per trunk weight."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.buffers: dict[str, np.ndarray] = {}

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float, active=None) -> None:
        buf = self.buffers.get(key)
        if buf is None and self.cfg.momentum:
            buf = self.buffers[key] = np.zeros_like(param)
        sgd_update(param, grad, buf, lr, self.cfg, active)


# --------------------------------------------------------------------------- steps

@dataclass
class StepResult:
    loss_P: float
    loss_S: float = math.nan
    kd_loss: float = 0.0
    grads_P: GradSet | None = None
    grads_S: GradSet | None = None
    trunk_grads: dict[str, np.ndarray] | None = None


def _finite(*losses: float) -> None:
    if not all(math.isfinite(v) for v in losses):
        raise NumericalError(f"non-finite loss {losses}")


def _update_path(net: DualPathNetwork, opt: SGD, gs: GradSet, path: str, lr: float) -> None:
    for key, arr in net.path_params(path):
        opt.update(key, arr, gs[key], lr)


def _update_biases(net: DualPathNetwork, opt: SGD, gs: GradSet, lr: float) -> None:
    for l in net.prunable:
        if l.bias is not None:
            opt.update(l.bias_id, l.bias, gs[l.bias_id], lr)


def _single_path_step(net, opt, x, y, lr, routing: str) -> StepResult:
    logits = net.forward(P, x, tc.TRAIN)
    loss, g = tc.softmax_cross_entropy(logits, y)
    _finite(loss)
    gs = net.backward(P, g)
    trunk = {}
    for l in net.prunable:
        gw = gs[l.weight_id]
        if routing == STATIC:
            active = l.mask.astype(bool)
            gw = np.where(active, gw, 0)
            opt.update(l.weight_id, l.weight, gw, lr, active=active)
        else:
            opt.update(l.weight_id, l.weight, gw, lr)
        trunk[l.weight_id] = gw
    _update_biases(net, opt, gs, lr)
    _update_path(net, opt, gs, P, lr)
    return StepResult(loss, grads_P=gs, trunk_grads=trunk)


def train_step_dense(net, opt, x, y, lr) -> StepResult:
    return _single_path_step(net, opt, x, y, lr, DENSE)


def train_step_dpf(net, opt, x, y, lr) -> StepResult:
    """P-path forward/backward; the gradient wrt the masked view updates every real weight."""
    return _single_path_step(net, opt, x, y, lr, DPF)


def train_step_static(net, opt, x, y, lr) -> StepResult:
    return _single_path_step(net, opt, x, y, lr, STATIC)


def train_step_dcil(net, opt, x, y, lr, kd_weight: float, temperature: float,
                    symmetric: bool = False) -> StepResult:
    zp = net.forward(P, x, tc.TRAIN)
    zs = net.forward(S, x, tc.TRAIN)
    ce_p, gp = tc.softmax_cross_entropy(zp, y)
    ce_s, gs_ = tc.softmax_cross_entropy(zs, y)
    kl_p = kl_s = 0.0
    if kd_weight > 0:
        # P learns from S and S from P; teachers are constants unless symmetric
        if symmetric:
            kl_p, gkp, gkp_t = tc.kd_kl_loss(zs, zp, temperature, teacher_grad=True)
            kl_s, gks, gks_t = tc.kd_kl_loss(zp, zs, temperature, teacher_grad=True)
            gp = gp + kd_weight * (gkp + gks_t)
            gs_ = gs_ + kd_weight * (gks + gkp_t)
        else:
            kl_p, gkp = tc.kd_kl_loss(zs, zp, temperature)
            kl_s, gks = tc.kd_kl_loss(zp, zs, temperature)
            gp = gp + kd_weight * gkp
            gs_ = gs_ + kd_weight * gks
    loss_p = ce_p + kd_weight * kl_p
    loss_s = ce_s + kd_weight * kl_s
    _finite(loss_p, loss_s)
    grads_p = net.backward(P, gp)
    grads_s = net.backward(S, gs_)
    trunk = {}
    for l in net.prunable:
        g = np.where(l.mask.astype(bool), grads_p[l.weight_id], grads_s[l.weight_id])
        opt.update(l.weight_id, l.weight, g, lr)
        trunk[l.weight_id] = g
    _update_biases(net, opt, grads_p, lr)
    _update_path(net, opt, grads_p, P, lr)
    _update_path(net, opt, grads_s, S, lr)
    return StepResult(loss_p, loss_s, kd_weight * (kl_p + kl_s), grads_p, grads_s, trunk)


# --------------------------------------------------------------------------- trainer

class Trainer:
    """Owns the optimizer state, global iteration counter and mask refresh loop."""

    def __init__(self, net: DualPathNetwork, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.opt = SGD(cfg.optimizer)
        self.schedule = cfg.schedule
        self.policy = cfg.policy
        self.lr_schedule = cfg.lr_schedule
        self.global_iter = 0
        self.current_sparsity = 0.0
        self.masks_frozen = False
        self.refreshes: list[dict] = []

    @property
    def prunes(self) -> bool:
        return self.cfg.trainer != DENSE

    def kd_weight_at(self, epoch: int) -> float:
        return 0.0 if epoch < self.cfg.warmup_epochs else self.cfg.kd_weight

    def refresh_masks(self, sparsity: float, epoch_pos: float) -> None:
        apply_masks(self.net, compute_masks(self.net.prunable, sparsity, self.policy.granularity))
        self.current_sparsity = sparsity
        audit = sparsity_audit(self.net)
        self.refreshes.append(dict(global_iter=self.global_iter, epoch=epoch_pos, S_c=sparsity,
                                   zeros=audit.zeros, total=audit.total,
                                   realized=audit.global_sparsity))
        if self.cfg.freeze_after_ramp and epoch_pos >= self.schedule.end_epoch:
            self.masks_frozen = True

    def init_masks(self) -> None:
        if self.prunes and self.schedule.initial > 0:
            self.refresh_masks(sparsity_at(self.schedule, self.schedule.start_epoch), self.schedule.start_epoch)

    def step(self, x, y, lr: float, kd_weight: float) -> StepResult:
        kind = self.cfg.trainer
        if kind == DCIL:
            return train_step_dcil(self.net, self.opt, x, y, lr, kd_weight, self.cfg.temperature,
                                   self.cfg.kd_symmetric)
        if kind == DPF:
            return train_step_dpf(self.net, self.opt, x, y, lr)
        if kind == STATIC:
            return train_step_static(self.net, self.opt, x, y, lr)
        return train_step_dense(self.net, self.opt, x, y, lr)

    def train_epoch(self, loader: BatchIterator, epoch: int,
                    on_iter: Callable[[int, int, bool], None] | None = None) -> dict:
        lr = self.lr_schedule.lr_at(epoch)
        lam = self.kd_weight_at(epoch)
        ipe = len(loader)
        aug_rng = epoch_rng(self.cfg.seed, epoch, stream=1)
        sums = dict(loss_P=0.0, loss_S=0.0, kd_loss=0.0)
        n = 0
        for i, (x, y) in enumerate(loader.epoch(epoch)):
            self.global_iter += 1
            refreshed = False
            if self.prunes and not self.masks_frozen and should_refresh(self.global_iter, self.policy.frequency):
                pos = epoch + i / ipe
                self.refresh_masks(sparsity_at(self.schedule, pos), pos)
                refreshed = True
            x = augment(x, self.cfg.augment, aug_rng)
            res = self.step(x, y, lr, lam)
            sums["loss_P"] += res.loss_P
            sums["loss_S"] += res.loss_S
            sums["kd_loss"] += res.kd_loss
            n += 1
            if on_iter is not None:
                on_iter(i, self.global_iter, refreshed)
        self.net.clear_contexts()
        out = {k: v / n if n else math.nan for k, v in sums.items()}
        out["lr"] = lr
        return out


# --------------------------------------------------------------------------- fit

def make_network(cfg: TrainConfig, input_shape, num_classes: int) -> DualPathNetwork:
    if cfg.arch not in ARCHS:
        raise ConfigError(f"unknown arch {cfg.arch!r}; choose from {sorted(ARCHS)}")
    return build(ARCHS[cfg.arch](num_classes), tuple(input_shape), seed=cfg.seed, dtype=cfg.dtype)


def _eval_row(trainer: Trainer, test_set: Dataset, epoch: int, stats: dict) -> dict:
    net = trainer.net
    acc_p = evaluate(net, P, test_set)
    acc_s = evaluate(net, S, test_set) if trainer.cfg.trainer == DCIL else math.nan
    return dict(epoch=epoch, iter=trainer.global_iter, lr=stats.get("lr", trainer.lr_schedule.lr_at(max(epoch, 0))),
                S_c=trainer.current_sparsity, realized_sparsity=sparsity_audit(net).global_sparsity,
                loss_P=stats.get("loss_P", math.nan), loss_S=stats.get("loss_S", math.nan),
                kd_loss=stats.get("kd_loss", 0.0), acc_P=acc_p, acc_S=acc_s)


def _save(trainer: Trainer, record: RunRecord, path: Path, epoch: int) -> None:
    meta = dict(epoch=epoch, global_iter=trainer.global_iter, config=dump_config(trainer.cfg),
                current_sparsity=trainer.current_sparsity, masks_frozen=trainer.masks_frozen,
                rows=record.rows, refreshes=record.refreshes)
    save_checkpoint(path, trainer.net, trainer.opt.buffers, meta)


def _cast(ds: Dataset, dtype) -> Dataset:
    if ds.images.dtype == dtype:
        return ds
    return dataclasses.replace(ds, images=ds.images.astype(dtype))


def fit(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, out_dir: str | Path | None = None,
        resume: str | Path | None = None, probe_set: Dataset | None = None,
        stop_after: int | None = None) -> RunRecord:
    """Train per ``cfg``; evaluates both paths after each epoch.

    Row ``epoch == -1`` holds the evaluation before training. When
    ``cfg.probe_epoch`` is set, that epoch runs under a sawtooth probe on
    ``probe_set`` (default: ``test_set``). ``stop_after`` ends training after
    the given epoch index.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config=dict(text=dump_config(cfg)))
    train_set, test_set = _cast(train_set, cfg.dtype), _cast(test_set, cfg.dtype)
    loader = BatchIterator(train_set, cfg.batch_size, cfg.seed)

    if resume is not None:
        net, buffers, meta = load_checkpoint(resume)
        saved = parse_config(meta["config"])
        if not same_training(saved, cfg):
            raise ConfigError("resume config differs from the checkpoint's config")
        trainer = Trainer(net, cfg)
        trainer.opt.buffers = {k: v.copy() for k, v in buffers.items()}
        trainer.global_iter = meta["global_iter"]
        trainer.current_sparsity = meta["current_sparsity"]
        trainer.masks_frozen = meta["masks_frozen"]
        record.rows = meta["rows"]
        record.refreshes = trainer.refreshes = meta["refreshes"]
        first = meta["epoch"] + 1
    else:
        net = make_network(cfg, train_set.images.shape[1:], train_set.num_classes)
        trainer = Trainer(net, cfg)
        record.refreshes = trainer.refreshes
        trainer.init_masks()
        record.rows.append(_eval_row(trainer, test_set, -1, {}))
        first = 0

    last = cfg.epochs - 1 if stop_after is None else min(stop_after, cfg.epochs - 1)
    for epoch in range(first, last + 1):
        probe = None
        if epoch == cfg.probe_epoch:
            pset = _cast(probe_set, cfg.dtype) if probe_set is not None else test_set
            probe = SawtoothProbe(net, pset, epoch, trainer.global_iter)
        stats = trainer.train_epoch(loader, epoch, on_iter=probe.on_iter if probe else None)
        if probe:
            record.probe = probe.rows
        row = _eval_row(trainer, test_set, epoch, stats)
        record.rows.append(row)
        log.info("epoch %d lr %.4g S_c %.4f loss_P %.4f acc_P %.4f acc_S %.4f", epoch, row["lr"],
                 row["S_c"], row["loss_P"], row["acc_P"], row["acc_S"])
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save(trainer, record, out / f"ckpt_epoch{epoch:03d}.npz", epoch)
    if out is not None:
        _save(trainer, record, out / "final.npz", max(last, first - 1))
    record.trainer = trainer
    return record
