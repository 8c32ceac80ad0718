"""End-to-end training: AdamW, stepped learning-rate schedule, metrics
logging, and bit-exact checkpointing.

Runs are deterministic given (config, seed): initialization, batch order,
and evaluation all derive from the run seed, and a checkpoint carries
everything needed to resume with an identical loss sequence.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import tensor as T
from .data import load_dataset
from .errors import CheckpointError, ConfigError, ContractError, TrainingAborted
from .heads import LossWeights, accuracy_at_05, giou, iou, total_loss
from .model import GroundingModel, ModelConfig
from .text import Vocabulary, batch_expressions, tokenize

CHECKPOINT_MAGIC = b"RFBX0001"


@dataclass
class TrainConfig:
    """Flat training configuration; model fields live in `model`."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 24
    batch_size: int = 32
    eval_batch_size: int = 64
    seed: int = 0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0
    # Learning rate drops by 10x at these fractions of the epoch budget
    # (70/120 and 90/120 of the reference schedule).
    decay_fracs: tuple = (70 / 120, 90 / 120)
    train_data: str = ""
    val_data: str = ""

    def validate(self):
        self.model.validate()
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas ({self.beta1}, {self.beta2}) must lie in [0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch size must be positive")
        LossWeights(self.lambda_l1, self.lambda_iou).validate()
        if any(not 0 < f < 1 for f in self.decay_fracs):
            raise ConfigError(f"decay fractions {self.decay_fracs} must lie in (0, 1)")
        if list(self.decay_fracs) != sorted(self.decay_fracs):
            raise ConfigError("decay fractions must be increasing")
        return self

    def to_flat_dict(self):
        out = self.model.to_dict()
        for f in fields(self):
            if f.name == "model":
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_flat_dict(cls, d):
        d = dict(d)
        model_names = {f.name for f in fields(ModelConfig)}
        own_names = {f.name for f in fields(cls)} - {"model"}
        unknown = set(d) - model_names - own_names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict({k: d[k] for k in d if k in model_names})
        kwargs = {k: d[k] for k in d if k in own_names}
        if "decay_fracs" in kwargs:
            kwargs["decay_fracs"] = tuple(kwargs["decay_fracs"])
        return cls(model=model, **kwargs).validate()

    @property
    def loss_weights(self):
        return LossWeights(self.lambda_l1, self.lambda_iou)


def lr_at(epoch, config):
    """Piecewise-constant schedule: x0.1 at each scaled breakpoint."""
    if epoch < 0:
        raise ConfigError(f"epoch must be nonnegative, got {epoch}")
    lr = config.lr
    for frac in config.decay_fracs:
        if epoch >= round(frac * config.epochs):
            lr *= 0.1
    return lr


def adamw_step(params, state, lr, weight_decay, beta1, beta2, eps):
    """One decoupled-weight-decay Adam update over `params`.

    state holds first/second moments keyed by parameter name plus the
    shared step counter; it is mutated in place.
    """
    state["t"] += 1
    t = state["t"]
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient; "
                                "run backward() before stepping")
        g = p.grad
        m = state["m"][p.name]
        v = state["v"][p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Stateful wrapper around adamw_step for a ParameterStore."""

    def __init__(self, store, lr=1e-4, weight_decay=1e-5,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {
            "t": 0,
            "m": {p.name: np.zeros_like(p.data) for p in store},
            "v": {p.name: np.zeros_like(p.data) for p in store},
        }

    def step(self, lr=None):
        adamw_step(list(self.store), self.state, self.lr if lr is None else lr,
                   self.weight_decay, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model, train_config, epoch, vocab, rng_state=None,
                    optimizer=None):
    """Single-file checkpoint: JSON header + little-endian parameter blob.

    The header records a manifest (name, shape, dtype, byte offset) for
    every parameter, the full training config, current epoch, vocabulary,
    RNG state, and optionally the optimizer moments for exact resumption.
    """
    manifest = []
    blobs = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": str(arr.dtype), "offset": offset,
                         "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for p in model.store:
        push(p.name, p.data)
    opt_header = None
    if optimizer is not None:
        for p in model.store:
            push(f"__adam_m__{p.name}", optimizer.state["m"][p.name])
            push(f"__adam_v__{p.name}", optimizer.state["v"][p.name])
        opt_header = {"t": optimizer.state["t"]}
    header = {
        "format_version": 1,
        "config": train_config.to_flat_dict(),
        "epoch": epoch,
        "vocab": list(vocab.words),
        "rng_state": rng_state,
        "optimizer": opt_header,
        "params": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read a checkpoint into (header, {name: array})."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    data = raw[16 + header_len:]
    arrays = {}
    for entry in header["params"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise CheckpointError(f"{path}: truncated data for {entry['name']!r}")
        arr = np.frombuffer(data[start:start + n],
                            dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return header, arrays


def restore_model(path_or_header, arrays=None):
    """Rebuild the model (and vocabulary) a checkpoint was saved from."""
    if arrays is None:
        header, arrays = load_checkpoint(path_or_header)
    else:
        header = path_or_header
    config = TrainConfig.from_flat_dict(header["config"])
    vocab = Vocabulary(header["vocab"])
    model = GroundingModel(config.model, vocab.size, seed=config.seed)
    expected = {p.name: p.data.shape for p in model.store}
    stored = {e["name"]: tuple(e["shape"]) for e in header["params"]
              if not e["name"].startswith("__adam_")}
    if expected.keys() != stored.keys():
        missing = sorted(expected.keys() - stored.keys())
        extra = sorted(stored.keys() - expected.keys())
        raise CheckpointError(
            f"checkpoint does not match model: missing={missing[:3]} extra={extra[:3]}")
    for name, shape in expected.items():
        if tuple(stored[name]) != shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for {name!r}: {stored[name]} vs {shape}")
        p = model.store.get(name)
        p.data = arrays[name].astype(p.data.dtype, copy=True)
    return model, vocab, config, header


# ---------------------------------------------------------------------------
# batching helpers


class _Batcher:
    """Pre-tokenized dataset tensors, served in seeded shuffled batches."""

    def __init__(self, dataset, vocab, max_words):
        exprs = [tokenize(s.expression, vocab, max_words) for s in dataset.samples]
        self.ids, self.lengths = batch_expressions(exprs)
        self.boxes = dataset.boxes()
        self.images_u8 = np.stack([s.image_uint8() for s in dataset.samples])
        self.n = len(dataset)

    def images(self, idx):
        batch = self.images_u8[idx].astype(np.float32) / 255.0
        return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))

    def batches(self, batch_size, rng=None):
        order = np.arange(self.n) if rng is None else rng.permutation(self.n)
        for start in range(0, self.n, batch_size):
            idx = order[start:start + batch_size]
            yield (self.images(idx), self.ids[idx], self.lengths[idx],
                   self.boxes[idx])


def _loss_terms(truth, pred):
    """Float L1/GIoU diagnostics matching the training objective."""
    l1 = float(np.abs(truth - pred).sum(axis=-1).mean())
    gious = np.array([giou(p, t) for p, t in zip(pred, truth)])
    return l1, float((1.0 - gious).mean())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    mean_iou: float
    records: list  # per-sample dicts: index, iou, pred, truth


def evaluate(model, dataset, vocab, batch_size=64):
    """Accuracy@0.5 plus per-sample IoU records; never mutates parameters."""
    batcher = dataset if isinstance(dataset, _Batcher) else _Batcher(
        dataset, vocab, model.config.max_words)
    preds = []
    for start in range(0, batcher.n, batch_size):
        idx = np.arange(start, min(start + batch_size, batcher.n))
        preds.append(model.predict(batcher.images(idx), batcher.ids[idx],
                                   batcher.lengths[idx]))
    preds = np.concatenate(preds, axis=0)
    truths = batcher.boxes
    records = [{"index": i, "iou": iou(p, t),
                "pred": [float(x) for x in p], "truth": [float(x) for x in t]}
               for i, (p, t) in enumerate(zip(preds, truths))]
    acc = accuracy_at_05(list(preds), list(truths))
    mean_iou = float(np.mean([r["iou"] for r in records]))
    return EvalResult(accuracy=acc, mean_iou=mean_iou, records=records)


def evaluate_checkpoint(path, data_dir, batch_size=64):
    model, vocab, config, _ = restore_model(path)
    dataset = load_dataset(data_dir)
    return evaluate(model, dataset, vocab, batch_size=batch_size)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list           # one dict per epoch
    best_accuracy: float
    best_epoch: int
    best_path: str
    last_path: str
    model: GroundingModel
    vocab: Vocabulary


def _epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, 1000 + epoch]))


def train(config, out_dir, resume_from=None, log=print, stop_after_epoch=None):
    """Seeded training loop; returns the result and writes under out_dir:

      metrics.jsonl  one record per epoch/split
      last.ckpt      rolling checkpoint with optimizer state
      best.ckpt      parameters of the best validation epoch

    stop_after_epoch interrupts the run once that epoch is checkpointed
    (the schedule still follows config.epochs); resume from last.ckpt to
    continue the identical run.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    train_set = load_dataset(config.train_data)
    val_set = load_dataset(config.val_data)
    vocab = Vocabulary.build(train_set.expressions())

    start_epoch = 0
    optimizer = None
    if resume_from is not None:
        model, ckpt_vocab, ckpt_config, header = restore_model(resume_from)
        if ckpt_config.to_flat_dict() != config.to_flat_dict():
            raise CheckpointError("resume config does not match checkpoint config")
        if ckpt_vocab.words != vocab.words:
            raise CheckpointError("resume vocabulary does not match the training data")
        if header.get("optimizer") is None:
            raise CheckpointError(f"{resume_from} has no optimizer state; cannot resume")
        optimizer = AdamW(model.store, config.lr, config.weight_decay,
                          config.beta1, config.beta2, config.adam_eps)
        _, arrays = load_checkpoint(resume_from)
        for p in model.store:
            optimizer.state["m"][p.name] = arrays[f"__adam_m__{p.name}"].astype(p.data.dtype)
            optimizer.state["v"][p.name] = arrays[f"__adam_v__{p.name}"].astype(p.data.dtype)
        optimizer.state["t"] = header["optimizer"]["t"]
        start_epoch = header["epoch"] + 1
    else:
        model = GroundingModel(config.model, vocab.size, seed=config.seed)
        optimizer = AdamW(model.store, config.lr, config.weight_decay,
                          config.beta1, config.beta2, config.adam_eps)

    train_batches = _Batcher(train_set, vocab, config.model.max_words)
    val_batches = _Batcher(val_set, vocab, config.model.max_words)
    weights = config.loss_weights
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    history = []
    best_acc, best_epoch = -1.0, -1
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics_fh:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(epoch, config)
            rng = _epoch_rng(config.seed, epoch)
            losses, l1_terms, iou_terms = [], [], []
            for batch_i, (images, ids, lengths, boxes) in enumerate(
                    train_batches.batches(config.batch_size, rng)):
                model.store.zero_grad()
                with T.Tape() as tape:
                    out = model.forward(T.as_tensor(images), ids, lengths)
                    loss = total_loss(boxes, out.box, weights)
                    loss_val = loss.item()
                    if not np.isfinite(loss_val):
                        l1, gi = _loss_terms(boxes, out.box.numpy())
                        raise TrainingAborted(
                            f"non-finite loss {loss_val} at epoch {epoch} batch {batch_i} "
                            f"(l1 term {l1}, giou term {gi})",
                            epoch=epoch, batch=batch_i, terms={"l1": l1, "giou": gi})
                    T.backward(loss, tape=tape)
                optimizer.step(lr=lr)
                losses.append(loss_val)
                l1, gi = _loss_terms(boxes, out.box.numpy())
                l1_terms.append(l1)
                iou_terms.append(gi)
            val = evaluate(model, val_batches, vocab, config.eval_batch_size)
            record = {
                "epoch": epoch, "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_l1": float(np.mean(l1_terms)),
                "train_giou_gap": float(np.mean(iou_terms)),
                "val_acc05": val.accuracy, "val_mean_iou": val.mean_iou,
            }
            history.append(record)
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()
            log(f"epoch {epoch:3d} lr {lr:.1e} loss {record['train_loss']:.4f} "
                f"val acc@0.5 {val.accuracy:.3f} iou {val.mean_iou:.3f}")
            rng_state = {"seed": config.seed, "epoch": epoch,
                         "bit_generator": rng.bit_generator.state}
            save_checkpoint(last_path, model, config, epoch, vocab,
                            rng_state=rng_state, optimizer=optimizer)
            if val.accuracy > best_acc:
                best_acc, best_epoch = val.accuracy, epoch
                save_checkpoint(best_path, model, config, epoch, vocab,
                                rng_state=rng_state)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
    return TrainResult(history=history, best_accuracy=best_acc,
                       best_epoch=best_epoch, best_path=best_path,
                       last_path=last_path, model=model, vocab=vocab)
