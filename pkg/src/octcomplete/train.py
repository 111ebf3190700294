"""SGD training loop with teacher forcing, checkpoints and resume."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import fileio
from .data import SamplePair, plane_fit_targets
from .errors import DomainError, NumericalError
from .losses import (
    completion_task_loss,
    semantic_task_loss,
    structure_loss,
    total_loss,
)
from .network import CompletionNet, NetworkSpec, OctreeBatch
from .octree import build_octree, find_in_sorted, majority_labels


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple = (6, 12, 18)
    lr_drop_factor: float = 10.0
    task_weight: float = 1.0
    seed: int = 0
    shuffle: bool = True
    max_steps: int = 0          # 0 means no cap
    log_every: int = 10

    def to_dict(self):
        d = dict(self.__dict__)
        d["lr_drop_epochs"] = ",".join(str(e) for e in self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f_ in cls.__dataclass_fields__.values():
            if f_.name not in d:
                continue
            v = d[f_.name]
            if f_.name == "lr_drop_epochs":
                kw[f_.name] = tuple(int(x) for x in str(v).split(",") if x != "")
            elif f_.type in ("int", int):
                kw[f_.name] = int(v)
            elif f_.type in ("float", float):
                kw[f_.name] = float(v)
            elif f_.type in ("bool", bool):
                kw[f_.name] = str(v) in ("True", "true", "1")
            else:
                kw[f_.name] = v
        return cls(**kw)


def lr_at_epoch(cfg: TrainConfig, epoch):
    """Step decay: divide by the drop factor at each listed epoch."""
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch >= e)
    return cfg.lr / (cfg.lr_drop_factor**drops)


@dataclass
class TrainSample:
    """One training pair in octree form, with precomputed regression targets."""

    partial: object
    gt: object
    targets: Optional[np.ndarray] = None   # (n_nonempty, 4) planes, completion task
    labels: Optional[np.ndarray] = None    # per stored finest node, semantic task


def prepare_sample(pair: SamplePair, spec: NetworkSpec) -> TrainSample:
    """Octree-ify a point pair: input at input_depth, target at output_depth."""
    partial = build_octree(pair.partial, spec.input_depth)
    gt = build_octree(pair.complete, spec.output_depth)
    if spec.task == "completion":
        return TrainSample(partial, gt, targets=plane_fit_targets(pair.complete, gt))
    return TrainSample(partial, gt, labels=majority_labels(gt, pair.complete))


def _head_targets(sample: TrainSample, keys, task):
    """Targets aligned with the decoder's finest-level keys for one sample."""
    lv = sample.gt.levels[sample.gt.depth]
    rows = find_in_sorted(lv.keys, keys)
    if task == "completion":
        # targets are stored in nonempty-rank order
        rank = np.cumsum(lv.status.astype(np.int64)) - 1
        out = np.zeros((len(keys), 4))
        ok = rows >= 0
        sel = rows[ok]
        nonempty = lv.status[sel] == 1
        out[np.flatnonzero(ok)[nonempty]] = sample.targets[rank[sel[nonempty]]]
        return out
    out = np.full(len(keys), -1, dtype=np.int64)
    ok = rows >= 0
    out[ok] = sample.labels[rows[ok]]
    return out


class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay.

    decay is added to the gradient before the momentum update and skipped
    for parameters flagged decay=False (norm scales/shifts, biases).
    """

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = {
            name: np.zeros_like(fm.values)
            for name, fm in params.store.items()
            if params.meta[name]["trainable"]
        }

    def step(self, lr):
        cfg = self.cfg
        for name, v in self.velocity.items():
            fm = self.params.store[name]
            g = fm.grad if fm.grad is not None else np.zeros_like(fm.values)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}")
            g = g.astype(fm.values.dtype)
            if self.params.meta[name]["decay"]:
                g = g + cfg.weight_decay * fm.values
            v *= cfg.momentum
            v += g
            fm.values -= lr * v
        self.params.zero_grad()


class Trainer:
    def __init__(self, net: CompletionNet, cfg: TrainConfig, samples: List[TrainSample]):
        if not samples:
            raise DomainError("no training samples")
        self.net = net
        self.cfg = cfg
        self.samples = samples
        self.opt = SGD(net.params, cfg)
        self.epoch = 0
        self.history: List[Dict] = []

    # -- one optimization step --------------------------------------------

    def step(self, indices, lr):
        net = self.net
        task = net.spec.task
        batch = [self.samples[i] for i in indices]
        in_batch = OctreeBatch([s.partial for s in batch])
        gt_batch = OctreeBatch([s.gt for s in batch])

        with ad.Tape():
            code, feats = net.encode(in_batch, train=True)
            res = net.decode(code, in_batch, feats, gt_batch=gt_batch, train=True)
            struct = {
                l: structure_loss(res.logits[l], res.gt_status[l])
                for l in res.logits
            }
            d = net.spec.output_depth
            if res.head_out is None:
                raise NumericalError("teacher-forced decode produced no output nodes")
            tparts = []
            for b, s in enumerate(batch):
                tparts.append(_head_targets(s, res.state.keys[d][b], task))
            merged = np.concatenate(tparts)
            if task == "completion":
                task_l = completion_task_loss(res.head_out, merged[res.head_rows])
            else:
                labels = merged[res.head_rows]
                if np.any(labels < 0):
                    raise DomainError("unlabeled ground-truth node reached the head")
                task_l = semantic_task_loss(res.head_out, labels)
            loss, report = total_loss(
                struct, task_l, d, w=self.cfg.task_weight, start_level=net.spec.coarsest + 1
            )
            if not np.isfinite(report.total):
                raise NumericalError(f"non-finite loss {report.total}")
            ad.backward(loss)
        self.opt.step(lr)

        acc = {
            l: float((res.pred_status[l] == res.gt_status[l]).mean())
            for l in res.pred_status
        }
        report.metrics["status_accuracy"] = acc
        report.metrics["lr"] = lr
        return report

    # -- epochs ------------------------------------------------------------

    def run(self, checkpoint_path=None, config_values=None, log=None):
        cfg = self.cfg
        n = len(self.samples)
        steps_done = 0
        while self.epoch < cfg.epochs:
            rng = np.random.default_rng(cfg.seed + 1000 * self.epoch)
            order = rng.permutation(n) if cfg.shuffle else np.arange(n)
            lr = lr_at_epoch(cfg, self.epoch)
            epoch_losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                report = self.step(idx, lr)
                epoch_losses.append(report.total)
                steps_done += 1
                if log and steps_done % cfg.log_every == 0:
                    log(
                        f"epoch {self.epoch} step {steps_done} "
                        f"loss {report.total:.4f} task {report.task:.4f} lr {lr:g}"
                    )
                if cfg.max_steps and steps_done >= cfg.max_steps:
                    break
            self.epoch += 1
            self.history.append(
                {"epoch": self.epoch, "loss": float(np.mean(epoch_losses)), "lr": lr}
            )
            if checkpoint_path:
                self.save(checkpoint_path, config_values or {})
            if cfg.max_steps and steps_done >= cfg.max_steps:
                break
        return self.history

    # -- persistence --------------------------------------------------------

    def save(self, path, config_values):
        arrays = dict(self.net.params.state_arrays())
        for name, v in self.opt.velocity.items():
            arrays["opt." + name] = v
        text = fileio.config_to_text(config_values)
        fileio.save_checkpoint(path, arrays, text, self.epoch)

    def load(self, path, expect_config=None):
        ck = fileio.load_checkpoint(path)
        if expect_config is not None:
            text = fileio.config_to_text(expect_config)
            if text != ck["config_text"]:
                raise fileio.DataError("checkpoint config does not match this run")
        load_arrays(self.net.params, ck["arrays"])
        for name, v in self.opt.velocity.items():
            key = "opt." + name
            if key in ck["arrays"]:
                v[...] = ck["arrays"][key]
        self.epoch = ck["epoch"]
        return ck


def load_arrays(params, arrays):
    """Copy checkpointed tensors into the parameter store by name."""
    for name, fm in params.store.items():
        if name not in arrays:
            raise fileio.DataError(f"checkpoint missing tensor {name}")
        if arrays[name].shape != fm.values.shape:
            raise fileio.DataError(
                f"tensor {name} shape {arrays[name].shape} != {fm.values.shape}"
            )
        fm.values[...] = arrays[name]


def spec_config_values(spec: NetworkSpec):
    return {f"net.{k}": v for k, v in spec.__dict__.items()}


def net_from_checkpoint(path):
    """Rebuild the network a checkpoint was trained with and load its weights."""
    ck = fileio.load_checkpoint(path)
    values = {}
    for line in ck["config_text"].splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            values[k] = v
    net = CompletionNet(spec_from_config_values(values))
    load_arrays(net.params, {k: v for k, v in ck["arrays"].items() if not k.startswith("opt.")})
    return net, ck


def spec_from_config_values(values):
    kw = {}
    for f_ in NetworkSpec.__dataclass_fields__.values():
        key = f"net.{f_.name}"
        if key not in values:
            continue
        v = values[key]
        if f_.type in ("int", int):
            kw[f_.name] = int(v)
        elif f_.type in ("bool", bool):
            kw[f_.name] = str(v) in ("True", "true", "1")
        else:
            kw[f_.name] = v
    return NetworkSpec(**kw)
