"""Training loop for the multi-objective (task + equivariance) objective:
Adam/SGD with decoupled weight decay, a one-cycle learning-rate schedule,
per-step metrics, evaluation, and bit-exact checkpoint/resume.

One step forwards the batch together with its transformed copies (the
copies double as augmentation for the primary loss), reads the group-pooled
maps at every monitored tap, and adds the beta/alpha-weighted equivariance
terms to the classification loss before the optimizer update.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ien.data import Dataset, EquivBatch, make_equiv_batch, splitmix64
from ien.equivariance import (
    EquivConfig,
    channels_for_element,
    equiv_meter,
    layer_equiv_loss,
    total_objective,
)
from ien.groups import GroupSpec
from ien.layers import softmax_cross_entropy
from ien.models import Model
from ien.tensor import Tape, Tensor, backward, concat, narrow

CHECKPOINT_MAGIC = b"IENC"
CHECKPOINT_VERSION = 1


class NanLossError(RuntimeError):
    """Raised when a loss turns non-finite; carries the first bad tensor."""

    def __init__(self, first_tensor: Optional[str]):
        self.first_tensor = first_tensor or "<unknown>"
        super().__init__(f"non-finite loss; first non-finite tensor: {self.first_tensor}")


@dataclass
class TrainConfig:
    epochs_cycle: int = 70
    epochs_tail: int = 20
    epochs_rise: Optional[float] = None      # default: a quarter of the cycle
    lr_min: float = 1e-5
    lr_max: float = 5e-3
    batch_size: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 1e-7
    seed: int = 0
    deterministic: bool = True
    meter_sample: int = 256
    meter_every_epoch: bool = True
    checkpoint_every: int = 0                # epochs between checkpoints; 0 = end only

    def __post_init__(self):
        if self.lr_min >= self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} must be < lr_max {self.lr_max}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def rise(self) -> float:
        return self.epochs_rise if self.epochs_rise is not None else self.epochs_cycle / 4.0

    @property
    def total_epochs(self) -> int:
        return self.epochs_cycle + self.epochs_tail


def one_cycle_lr(step: float, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Piecewise-linear one-cycle rate in fractional epochs: lr_min up to
    lr_max over the rise, back down over the rest of the cycle, then a
    constant lr_min tail."""
    e = step / steps_per_epoch
    rise, cycle, tail = config.rise, config.epochs_cycle, config.epochs_tail
    if e < 0 or e > cycle + tail:
        raise ValueError(f"step at epoch {e} is outside the {cycle + tail}-epoch schedule")
    # branch boundaries sit on the constant side so the peak and the tail
    # values are exact, not reconstructed from a subtraction
    span = config.lr_max - config.lr_min
    if e < rise:
        return config.lr_min + (e / rise) * span
    if e < cycle:
        return config.lr_max - ((e - rise) / (cycle - rise)) * span
    return config.lr_min


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"opt.m.{k}": v for k, v in self.m.items()}
        state.update({f"opt.v.{k}": v for k, v in self.v.items()})
        state["opt.t"] = np.array([self.t], dtype=np.int64)
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k][...] = arrays[f"opt.m.{k}"]
            self.v[k][...] = arrays[f"opt.v.{k}"]
        self.t = int(arrays["opt.t"][0])


class SGD:
    def __init__(self, params: list[tuple[str, Tensor]], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.vel = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            vel = self.vel[name]
            vel *= self.momentum
            vel += g
            update = vel + self.weight_decay * p.data if self.weight_decay else vel
            p.data -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt.vel.{k}": v for k, v in self.vel.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.vel:
            self.vel[k][...] = arrays[f"opt.vel.{k}"]


def make_optimizer(config: TrainConfig, model: Model):
    if config.optimizer == "adam":
        return Adam(model.parameters(), beta1=config.beta1, beta2=config.beta2,
                    eps=config.adam_eps, weight_decay=config.weight_decay)
    return SGD(model.parameters(), momentum=config.momentum,
               weight_decay=config.weight_decay)


# ---------------------------------------------------------------------------
# one step


@dataclass
class StepMetrics:
    primary: float
    total: float
    equiv_by_tap: dict[int, float]           # raw per-tap sums over elements
    equiv_by_group: dict[str, float]         # beta-weighted per-group losses


def train_step(model: Model, batch: EquivBatch, config: EquivConfig,
               optimizer, lr: float) -> StepMetrics:
    """One forward/backward/update on a batch and its transformed copies."""
    model.train()
    specs = {spec.name: spec for spec in config.groups}
    monitored = config.monitored
    collect = bool(monitored) and bool(batch.copies) and config.active
    b = batch.x.shape[0]

    with Tape() as tape:
        if batch.copies:
            xs = [batch.x] + [x_p for _, x_p, _ in batch.copies]
            big = concat(xs, axis=0)
            labels = np.tile(batch.labels, len(xs))
        else:
            big = batch.x
            labels = batch.labels
        logits, pooled = model.forward(big, collect=collect)
        primary = softmax_cross_entropy(logits, labels)

        equiv_by_tap: dict[int, float] = {tap: 0.0 for tap in monitored}
        equiv_groups: dict[str, Tensor] = {}
        if collect:
            pooled_q = {tap: narrow(pooled[tap], 0, 0, b) for tap in monitored}
            for idx, (g, _x_p, _mask) in enumerate(batch.copies):
                spec = specs[batch.group_of[idx]]
                for tap in monitored:
                    if tap not in pooled:
                        raise ValueError(f"monitored tap {tap} missing from pooled maps")
                    pooled_p = narrow(pooled[tap], 0, (idx + 1) * b, b)
                    channels = channels_for_element(model.tap_layouts[tap], spec, g)
                    term = layer_equiv_loss(pooled_p, pooled_q[tap], g, channels=channels)
                    equiv_by_tap[tap] += term.item()
                    weighted = term * config.beta[tap]
                    name = spec.name
                    equiv_groups[name] = weighted if name not in equiv_groups \
                        else equiv_groups[name] + weighted
        total = total_objective(primary, equiv_groups, config)
        if not np.all(np.isfinite(total.data)) or not np.all(np.isfinite(primary.data)):
            raise NanLossError(tape.first_nonfinite())
        backward(total, tape)

    optimizer.step(lr)
    return StepMetrics(
        primary=primary.item(),
        total=total.item(),
        equiv_by_tap=equiv_by_tap,
        equiv_by_group={k: v.item() for k, v in equiv_groups.items()},
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions (ties resolve to the lowest
    class index)."""
    if len(ds) == 0:
        raise ValueError("evaluate on an empty dataset")
    prev = model.mode
    model.eval()
    correct = 0
    for start in range(0, len(ds), batch_size):
        part = ds.images[start:start + batch_size]
        logits, _ = model.forward(Tensor(part, dtype=model.config.dtype))
        pred = logits.data.argmax(axis=1)
        correct += int((pred == ds.labels[start:start + batch_size]).sum())
    model.mode = prev
    return correct / len(ds)


# ---------------------------------------------------------------------------
# checkpoints


_DT_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_DT_BY_CODE = {v: k for k, v in _DT_CODES.items()}


@dataclass
class Checkpoint:
    version: int
    config_hash: int
    epoch: int
    global_step: int
    rng_state: dict
    arrays: dict[str, np.ndarray]


def checkpoint_save(path, model: Model, optimizer, epoch: int, global_step: int,
                    rng_state: dict) -> None:
    arrays = dict(model.state_arrays())
    arrays.update(optimizer.state_arrays())
    rng_blob = json.dumps(rng_state, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">IQIQ", CHECKPOINT_VERSION, model.hash,
                             epoch, global_step))
        fh.write(struct.pack(">I", len(rng_blob)))
        fh.write(rng_blob)
        fh.write(struct.pack(">I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            code = _DT_CODES[arr.dtype]
            name_b = name.encode("utf-8")
            fh.write(struct.pack(">H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack(">BB", code, arr.ndim))
            fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def checkpoint_load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, config_hash, epoch, global_step = struct.unpack(">IQIQ", raw[4:28])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: version mismatch (file {version}, "
                         f"supported {CHECKPOINT_VERSION})")
    off = 28
    (rng_len,) = struct.unpack(">I", raw[off:off + 4]); off += 4
    rng_state = json.loads(raw[off:off + rng_len].decode("utf-8")); off += rng_len
    (count,) = struct.unpack(">I", raw[off:off + 4]); off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack(">H", raw[off:off + 2]); off += 2
        name = raw[off:off + nlen].decode("utf-8"); off += nlen
        code, ndim = struct.unpack(">BB", raw[off:off + 2]); off += 2
        shape = struct.unpack(f">{ndim}I", raw[off:off + 4 * ndim]); off += 4 * ndim
        dtype = _DT_BY_CODE[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(raw[off:off + nbytes], dtype=dtype).reshape(shape)
        arrays[name] = arr.copy()
        off += nbytes
    return Checkpoint(version=version, config_hash=config_hash, epoch=epoch,
                      global_step=global_step, rng_state=rng_state, arrays=arrays)


def checkpoint_restore(ckpt: Checkpoint, model: Model, optimizer) -> tuple[int, int, dict]:
    if ckpt.config_hash != model.hash:
        raise ValueError(f"checkpoint config hash {ckpt.config_hash:016x} does not "
                         f"match model {model.hash:016x}")
    model.load_state(ckpt.arrays)
    optimizer.load_state(ckpt.arrays)
    return ckpt.epoch, ckpt.global_step, ckpt.rng_state


# ---------------------------------------------------------------------------
# metrics stream


def _fmt(v: float) -> str:
    return repr(float(v))


class MetricsWriter:
    """One CSV row per training step; byte-stable for identical runs."""

    def __init__(self, path, tap_names: list[str]):
        self.path = Path(path) if path is not None else None
        self.tap_names = tap_names
        self.rows: list[str] = []
        header = ["step", "epoch", "lr", "primary"] + \
            [f"eq_{n}" for n in tap_names] + ["total"]
        self.rows.append(",".join(header))

    def add(self, step: int, epoch: int, lr: float, metrics: StepMetrics,
            taps: list[int]) -> None:
        row = [str(step), str(epoch), _fmt(lr), _fmt(metrics.primary)]
        row += [_fmt(metrics.equiv_by_tap.get(tap, 0.0)) for tap in taps]
        row.append(_fmt(metrics.total))
        self.rows.append(",".join(row))

    def flush(self) -> None:
        if self.path is not None:
            self.path.write_text("\n".join(self.rows) + "\n")


# ---------------------------------------------------------------------------
# the loop


def train_loop(model: Model, train_ds: Dataset, val_ds: Dataset,
               tcfg: TrainConfig, ecfg: EquivConfig,
               out_dir: Optional[Path] = None,
               resume_from: Optional[Path] = None) -> dict:
    """Full training run; returns (and optionally writes) the summary."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for tap in ecfg.monitored:
        if tap not in model.tap_layouts:
            raise ValueError(f"monitored tap {tap} does not exist in the model")

    optimizer = make_optimizer(tcfg, model)
    gen = np.random.Generator(np.random.PCG64(tcfg.seed))
    start_epoch, global_step = 0, 0
    if resume_from is not None:
        ckpt = checkpoint_load(resume_from)
        start_epoch, global_step, rng_state = checkpoint_restore(ckpt, model, optimizer)
        gen.bit_generator.state = rng_state

    n = len(train_ds)
    steps_per_epoch = n // tcfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"training set of {n} images is smaller than one batch")
    need_copies = any(spec.non_identity() for spec in ecfg.groups)
    meter_spec = ecfg.groups[0] if ecfg.groups else GroupSpec.rotations(4)
    probe_count = min(tcfg.meter_sample, len(val_ds))
    probe = val_ds.images[:probe_count]
    taps = sorted(model.tap_layouts)
    tap_names = [model.tap_names[t] for t in taps]

    metrics = MetricsWriter(out_dir / "metrics.csv" if out_dir else None, tap_names)
    meter_history: list[dict[str, float]] = []
    accuracy_history: list[float] = []
    wall_start = time.time()

    def run_meter() -> dict[str, float]:
        report = equiv_meter(model, probe, meter_spec, layers=taps)
        return dict(report.layer_totals)

    if start_epoch == 0:
        meter_history.append(run_meter())

    for epoch in range(start_epoch, tcfg.total_epochs):
        order = gen.permutation(n)
        model.train()
        for bi in range(steps_per_epoch):
            sel = order[bi * tcfg.batch_size:(bi + 1) * tcfg.batch_size]
            images = train_ds.images[sel]
            labels = train_ds.labels[sel]
            if need_copies:
                batch = make_equiv_batch(
                    images, labels, ecfg.groups,
                    policy_kind=ecfg.policy.kind, sample_k=ecfg.policy.k,
                    sample_seed=splitmix64(ecfg.policy.seed ^ global_step))
            else:
                batch = EquivBatch(x=Tensor(images), labels=labels,
                                   copies=[], group_of=[])
            lr = one_cycle_lr(global_step, tcfg, steps_per_epoch)
            step_metrics = train_step(model, batch, ecfg, optimizer, lr)
            metrics.add(global_step, epoch, lr, step_metrics, taps)
            global_step += 1

        accuracy_history.append(evaluate(model, val_ds))
        if tcfg.meter_every_epoch or epoch == tcfg.total_epochs - 1:
            meter_history.append(run_meter())
        if out_dir is not None:
            if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
                checkpoint_save(out_dir / f"epoch{epoch + 1:03d}.ckpt", model,
                                optimizer, epoch + 1, global_step,
                                gen.bit_generator.state)
            checkpoint_save(out_dir / "last.ckpt", model, optimizer, epoch + 1,
                            global_step, gen.bit_generator.state)

    metrics.flush()
    if not meter_history:
        meter_history.append(run_meter())

    final_acc = accuracy_history[-1] if accuracy_history else None
    summary = {
        "config_hash": f"{model.hash:016x}",
        "seed": tcfg.seed,
        "epochs": tcfg.total_epochs,
        "steps_per_epoch": steps_per_epoch,
        "val_accuracy_final": final_acc,
        "val_accuracy_best": max(accuracy_history) if accuracy_history else None,
        "val_accuracy_history": accuracy_history,
        "meter_initial": meter_history[0] if meter_history else None,
        "meter_final": meter_history[-1] if meter_history else None,
        "meter_history": meter_history,
        "wall_clock_sec": time.time() - wall_start,
    }
    if out_dir is not None:
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# desk-scale schedule preset


def mini_train_config(seed: int = 0, **overrides) -> TrainConfig:
    """Compressed 15-epoch schedule for the 2000/1000 desk-scale runs:
    4 epochs rise, 9 fall, 2 tail."""
    defaults = dict(epochs_cycle=13, epochs_tail=2, epochs_rise=4.0,
                    lr_min=1e-5, lr_max=5e-3, batch_size=64, seed=seed)
    defaults.update(overrides)
    return TrainConfig(**defaults)
