"""Desk-scale training: BCE on the score map, SGD with momentum, periodic validation."""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import DatasetIndex
from .metrics import confusion, prf1_oa, ConfusionCounts
from .synth import SynthConfig, synthetic_batch
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
VAL_OFFSET = 1_000_000


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    max_steps: int = 2000
    eval_interval: int = 50
    seed: int = 0
    loss: str = "bce"
    val_size: int = 32
    target_f1: float = 0.0  # percent; stop once validation F1 reaches it (0 disables)

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_interval < 1 or self.val_size < 1:
            raise ValueError("batch_size, eval_interval, val_size must be positive; max_steps >= 0")
        if self.loss != "bce":
            raise ValueError(f"unsupported loss {self.loss!r}")

    @classmethod
    def from_mapping(cls, mapping):
        allowed = {f.name: type(f.default) for f in fields(cls)}
        extra = set(mapping) - set(allowed)
        if extra:
            raise ValueError(f"unknown train option(s): {sorted(extra)}")
        return cls(**{k: allowed[k](v) for k, v in mapping.items()})


def bce_loss(scores, gt, eps=BCE_EPS):
    """Mean per-pixel binary cross-entropy and its gradient w.r.t. the scores.

    Scores are clamped to [eps, 1 - eps]; the gradient is evaluated at the
    clamped value and not zeroed outside the clamp.
    """
    s = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    y = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != target shape {y.shape}")
    s = np.clip(s, eps, 1 - eps)
    loss = -np.mean(y * np.log(s) + (1 - y) * np.log1p(-s))
    grad = (s - y) / (s * (1 - s)) / s.size
    return float(loss), grad


def optimizer_step(params, grads, state, cfg):
    """SGD with momentum: v <- momentum*v + g ; w <- w - lr*v.

    ``grads`` maps names to arrays; returns (new params, new state) and
    leaves the inputs untouched.
    """
    new_params, new_state = {}, {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = w
            if name in state:
                new_state[name] = state[name]
            continue
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        v = state.get(name)
        v = g.astype(w.dtype, copy=True) if v is None else (cfg.momentum * v + g).astype(w.dtype)
        new_state[name] = v
        new_params[name] = Tensor.wrap(w.data - w.dtype.type(cfg.lr) * v, name=w.name)
    return new_params, new_state


def _batches(data, cfg):
    """Infinite stream of (t1, t2, mask) batches."""
    if isinstance(data, SynthConfig):
        step = 0
        while True:
            start = step * cfg.batch_size
            yield synthetic_batch(data, range(start, start + cfg.batch_size))
            step += 1
    else:
        load = data.load if isinstance(data, DatasetIndex) else data.__getitem__
        rng = np.random.default_rng(cfg.seed)
        while True:
            order = rng.permutation(len(data))
            for i in range(0, max(len(order) - cfg.batch_size + 1, 1), cfg.batch_size):
                items = [load(int(j)) for j in order[i:i + cfg.batch_size]]
                yield tuple(Tensor(np.concatenate([np.asarray(getattr(it[k], "data", it[k])) for it in items]))
                            for k in range(3))


def validation_set(data, cfg):
    if isinstance(data, SynthConfig):
        return [synthetic_batch(data, range(VAL_OFFSET + i, min(VAL_OFFSET + i + cfg.batch_size,
                                                                VAL_OFFSET + cfg.val_size)))
                for i in range(0, cfg.val_size, cfg.batch_size)]
    if isinstance(data, DatasetIndex):
        out = []
        for i in range(len(data)):
            a, b, m = data.load(i)
            out.append((a, b, Tensor(m)))
        return out
    return list(data)


def evaluate_model(net, batches, threshold=0.5):
    """Micro-averaged metrics with BN in inference mode."""
    was = net.weights.training
    net.train(False)
    try:
        counts = ConfusionCounts()
        for t1, t2, mask in batches:
            counts = counts + confusion(net(t1, t2), mask, threshold)
    finally:
        net.train(was)
    return prf1_oa(counts)


@dataclass
class TrainResult:
    net: object
    history: list
    best_f1: float
    steps: int


def train(net, data, cfg, ckpt_path=None, history_path=None, val=None):
    """Train ``net`` in place.

    ``data`` is a SynthConfig, a DatasetIndex or a sequence of (t1, t2, mask)
    triples. A record {step, loss, val_f1, val_p, val_r} is appended to
    ``history_path`` (one JSON object per line) before the first update
    (step 0) and every ``eval_interval`` steps after it; ``loss`` is the
    mean training loss since the previous record. The best-F1 weights are
    written to ``ckpt_path``.
    """
    if val is None:
        val = validation_set(data, cfg)
    if history_path is not None:
        Path(history_path).write_text("")
    state = {}
    history = []
    best = -1.0
    losses = []
    stream = _batches(data, cfg)

    def record(step):
        nonlocal best, losses
        report = evaluate_model(net, val)
        rec = {"step": step, "loss": float(np.mean(losses)), "val_f1": report.f1,
               "val_p": report.p, "val_r": report.r}
        losses = []
        history.append(rec)
        log.info("step %d loss %.4f val F1 %.2f", step, rec["loss"], rec["val_f1"])
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if report.f1 > best:
            best = report.f1
            if ckpt_path is not None:
                checkpoint.save_model(net, ckpt_path)
        return bool(cfg.target_f1) and report.f1 >= cfg.target_f1

    step = 0
    for step in range(1, cfg.max_steps + 1):
        t1, t2, mask = next(stream)
        net.train(True)
        with Tape() as tape:
            scores = net(t1, t2)
        loss, seed = bce_loss(scores, mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if step == 1:
            losses.append(loss)
            record(0)
        grads = tape.backward(scores, seed.astype(scores.dtype))
        named = {name: grads.get(p) for name, p in net.params.items()}
        new_params, state = optimizer_step(net.params, {k: v for k, v in named.items() if v is not None},
                                           state, cfg)
        net.weights.params.update(new_params)
        losses.append(loss)
        if (step % cfg.eval_interval == 0 or step == cfg.max_steps) and record(step):
            break
    return TrainResult(net, history, best, step)


def train_config_from_env(base=None, environ=None):
    """Overlay ``LSNET_TRAIN_<FIELD>`` environment variables onto ``base``."""
    environ = os.environ if environ is None else environ
    values = asdict(base or TrainConfig())
    for f in fields(TrainConfig):
        key = f"LSNET_TRAIN_{f.name.upper()}"
        if key in environ:
            values[f.name] = environ[key]
    return TrainConfig.from_mapping(values)
