"""Training loop, checkpointing and batch inference on prepared splits.

Every random draw is keyed on the run seed plus a stage tag and the global
step, so a run resumed from checkpoint N replays steps N+1.. exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
import zlib

import numpy as np

from . import net, nn
from .checkpoint import WeightStore, read_checkpoint, write_checkpoint
from .config import RunConfig
from .data import ImageLoader, channel_mean, load_split, stage_rng, step_records
from .errors import DataProtocolError, NumericalError
from .optim import LrSchedule, lr_at, make_optimizer

log = logging.getLogger(__name__)

_INIT, _DROPOUT, _HEAD = 11, 12, 13
LOSS_LOG = "loss_log.csv"


def split_fingerprint(split_dir) -> int:
    with open(os.path.join(split_dir, "train.csv"), "rb") as fh:
        return zlib.crc32(fh.read())


def checkpoint_name(iteration):
    return f"ckpt_{iteration:08d}.bkwt"


def spec_from_meta(meta) -> net.NetworkSpec:
    return net.build_network(
        meta["model"], meta["classCount"], meta.get("keepProb", 0.5), bool(meta.get("poolStrideLiteral", 0))
    )


def class_names_from_meta(meta):
    return tuple(json.loads(meta["classNames"]))


def _make_optimizer(cfg: RunConfig):
    return make_optimizer(cfg.optimizer)


class Run:
    """Mutable training state: spec, parameters, optimizer, position."""

    def __init__(self, cfg: RunConfig, threads=1):
        self.cfg = cfg
        cfg.require_paths("splitDir")
        self.split = load_split(cfg.splitDir)
        self.fingerprint = split_fingerprint(cfg.splitDir)
        self.class_names = self.split.label_map.class_names
        self.spec = net.build_network(cfg.model, len(self.split.label_map), cfg.keepProb, cfg.poolStrideLiteral)
        h, w, _ = self.spec.input_shape
        self.loader = ImageLoader(cfg.imageRoot or None, h, w, threads=threads)
        self.optimizer = _make_optimizer(cfg)
        self.iteration = 0
        self.params = None
        self.mean = None

    # -- state ------------------------------------------------------------
    def initialize(self):
        cfg = self.cfg
        if cfg.pretrained:
            store = read_checkpoint(cfg.pretrained)
            base = spec_from_meta(store.meta) if "model" in store.meta else self.spec
            self.spec, self.params = net.replace_head(base, store, len(self.class_names),
                                                      stage_rng(cfg.seed, _HEAD))
        else:
            self.params = net.init_params(self.spec, stage_rng(cfg.seed, _INIT))
        if cfg.meanSubtract:
            self.mean = channel_mean(self.split.train, self.loader)
            self.loader.mean = self.mean.astype(nn.get_dtype())

    def resume(self, path):
        store = read_checkpoint(path)
        meta = store.meta
        if meta.get("model") != self.cfg.model:
            raise DataProtocolError(f"checkpoint is for model {meta.get('model')!r}, config says {self.cfg.model!r}")
        if meta.get("splitCrc") != self.fingerprint:
            raise DataProtocolError("checkpoint was trained on a different split")
        if meta.get("optimizer") != self.cfg.optimizer:
            raise DataProtocolError("checkpoint optimizer differs from config")
        net.check_params(self.spec, store)
        self.params = dict(store.tensors)
        self.iteration = int(meta["iteration"])
        self.optimizer.load_state_tensors(store.optimizer, self.iteration)
        self.mean = meta.get("mean")
        self.loader.mean = None if self.mean is None else np.asarray(self.mean).astype(nn.get_dtype())

    def store(self) -> WeightStore:
        cfg = self.cfg
        meta = {
            "model": cfg.model,
            "classCount": len(self.class_names),
            "classNames": json.dumps(list(self.class_names)),
            "keepProb": float(cfg.keepProb),
            "poolStrideLiteral": int(cfg.poolStrideLiteral),
            "seed": int(cfg.seed),
            "iteration": int(self.iteration),
            "optimizer": cfg.optimizer,
            "baseRate": float(cfg.baseRate),
            "dropEvery": float(cfg.dropEvery),
            "dropFactor": float(cfg.dropFactor),
            "batchSize": int(cfg.batchSize),
            "splitCrc": int(self.fingerprint),
        }
        if self.mean is not None:
            meta["mean"] = np.asarray(self.mean, dtype=np.float64)
        return WeightStore(dict(self.params), dict(self.optimizer.state_tensors()), meta)

    # -- loop -------------------------------------------------------------
    def step(self):
        cfg = self.cfg
        records = step_records(self.split.train, cfg.batchSize, cfg.seed, self.iteration)
        batch, kept = self.loader.load(records)
        if not kept:
            raise DataProtocolError(f"step {self.iteration}: every image in the batch failed to decode")
        labels = self.split.label_map.encode(kept)
        rate = lr_at(cfg.schedule, self.iteration)
        loss = net.train_step(self.spec, self.params, self.optimizer, batch, labels, self.iteration,
                              cfg.schedule, stage_rng(cfg.seed, _DROPOUT, self.iteration))
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {self.iteration}")
        self.iteration += 1
        return loss, rate


def train(cfg: RunConfig, resume=None, threads=1, until=None, progress=None):
    """Train to ``cfg.iterations`` (or ``until``); return the last checkpoint path."""
    os.makedirs(cfg.checkpointDir, exist_ok=True)
    run = Run(cfg, threads)
    if resume:
        run.resume(resume)
    else:
        run.initialize()
    with open(os.path.join(cfg.checkpointDir, "run_config.resolved.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    stop = cfg.iterations if until is None else min(until, cfg.iterations)
    log_path = os.path.join(cfg.checkpointDir, LOSS_LOG)
    new_log = not os.path.exists(log_path)
    last = None
    with open(log_path, "a", encoding="utf-8") as logf:
        if new_log:
            logf.write("iteration,loss,lr\n")
        while run.iteration < stop:
            step = run.iteration
            loss, rate = run.step()
            logf.write(f"{step},{loss!r},{rate!r}\n")
            logf.flush()
            if progress:
                progress(step, loss, rate)
            if run.iteration % cfg.checkpointEvery == 0 or run.iteration == stop:
                last = os.path.join(cfg.checkpointDir, checkpoint_name(run.iteration))
                write_checkpoint(last, run.store())
    if last is None:
        last = os.path.join(cfg.checkpointDir, checkpoint_name(run.iteration))
        write_checkpoint(last, run.store())
    return last


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class Model:
    """A checkpoint bound to its network spec, ready for inference."""

    def __init__(self, store: WeightStore):
        self.store = store
        self.spec = spec_from_meta(store.meta)
        net.check_params(self.spec, store)
        self.class_names = class_names_from_meta(store.meta)
        mean = store.meta.get("mean")
        self.mean = None if mean is None else np.asarray(mean)

    @classmethod
    def load(cls, path):
        return cls(read_checkpoint(path))

    def loader(self, image_root=None, threads=1, on_error="skip"):
        h, w, _ = self.spec.input_shape
        dtype = self.store.tensors[next(iter(self.store.tensors))].dtype
        return ImageLoader(image_root, h, w, mean=self.mean, dtype=dtype, cache=False, threads=threads,
                           on_error=on_error)

    def predict(self, batch):
        return net.forward(self.spec, self.store.tensors, batch, "infer")

    def predict_records(self, records, image_root=None, batch_size=64, threads=1):
        """``(probs, kept_records)`` in record order."""
        loader = self.loader(image_root, threads)
        probs, kept = [], []
        for start in range(0, len(records), batch_size):
            batch, ok = loader.load(records[start : start + batch_size])
            if ok:
                probs.append(self.predict(batch))
                kept.extend(ok)
        if not probs:
            return np.zeros((0, len(self.class_names))), []
        return np.concatenate(probs).astype(np.float64), kept


def train_accuracy(spec, params, batch, labels):
    probs = net.forward(spec, params, batch, "infer")
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def schedule_for(meta) -> LrSchedule:
    return LrSchedule(meta["baseRate"], meta["dropFactor"], meta["dropEvery"])
