"""Training and evaluation loops for the digit classifier."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import RunConfig
from .data import IdxDataset, load_idx, rotate_augment, take, to_input
from .model import Model, build_classifier

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "wall_seconds")


class NumericError(ArithmeticError):
    pass


@dataclass
class Split:
    x: np.ndarray  # (N, 1, S, S) float64
    y: np.ndarray  # (N,) int


def prepare_split(rc: RunConfig, which: str) -> Split:
    ds = load_idx(rc[f"data.{which}_images"], rc[f"data.{which}_labels"])
    if len(ds) == 0:
        from .data import DataError
        raise DataError(f"{which} set is empty")
    seed = rc["data.seed"] + (0 if which == "train" else 1)
    ds = take(ds, rc[f"data.{which}_size"], seed)
    if rc["data.rotate"]:
        ds = rotate_augment(ds, seed=seed + 100)
    return Split(to_input(ds.images, rc["data.input_size"]), ds.labels.astype(np.intp))


def batches(n: int, size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def predict(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def accuracy(model: Model, split: Split, batch_size: int = 64) -> float:
    logits = predict(model, split.x, batch_size)
    return float((logits.argmax(axis=1) == split.y).mean())


def train_step(model: Model, xb: np.ndarray, yb: np.ndarray, adam: ad.AdamState) -> tuple[float, int]:
    tape = ad.Tape()
    out = model.forward(xb, tape, train=True)
    loss, probs = ad.softmax_cross_entropy(out, yb)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    tape.backward(loss)
    for p in model.params.values():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name}")
    ad.adam_step(model.params, None, adam)
    correct = int((probs.reshape(len(yb), -1).argmax(axis=1) == yb).sum())
    return value, correct


def _fmt(v: float) -> str:
    return repr(float(v))


def train(rc: RunConfig, log=print, train_split: Split | None = None,
          test_split: Split | None = None) -> dict:
    """Train per ``rc``; writes ``metrics.csv``, ``best.dsfc`` and ``last.dsfc``.

    Returns a summary dict (best/final test accuracy, parameter count, paths).
    """
    out_dir = rc["output.dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfg = rc.model
    model = build_classifier(cfg, seed=rc["model.seed"])
    adam = ad.AdamState(lr=rc["train.lr"])
    epochs = rc["train.epochs"]
    metrics_path = rc.metrics_path
    best_path = os.path.join(out_dir, "best.dsfc")
    last_path = os.path.join(out_dir, "last.dsfc")
    log(f"model: {rc.describe()}")

    with open(metrics_path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(METRIC_COLUMNS)
    if epochs == 0:
        checkpoint.save(best_path, model, adam)
        checkpoint.save(last_path, model, adam)
        return {"epochs": 0, "best_test_acc": None, "final_test_acc": None,
                "params": model.num_params(), "checkpoint": best_path, "metrics": metrics_path}

    train_split = train_split or prepare_split(rc, "train")
    test_split = test_split or prepare_split(rc, "test")
    log(f"data: {len(train_split.y)} train / {len(test_split.y)} test at "
        f"{train_split.x.shape[-1]}x{train_split.x.shape[-1]}")
    rng = np.random.default_rng(rc["train.seed"])
    start = time.perf_counter()
    best = -1.0
    test_acc = None
    for epoch in range(epochs):
        adam.lr = ad.step_decay(rc["train.lr"], epoch, epochs, rc["train.lr_decay"], rc["train.lr_decay_at"])
        tot_loss, tot_correct, seen = 0.0, 0, 0
        for idx in batches(len(train_split.y), rc["train.batch_size"], rng):
            loss, correct = train_step(model, train_split.x[idx], train_split.y[idx], adam)
            tot_loss += loss * len(idx)
            tot_correct += correct
            seen += len(idx)
        test_acc = accuracy(model, test_split)
        wall = time.perf_counter() - start if rc["output.wall_clock"] else 0.0
        row = (str(epoch + 1), _fmt(tot_loss / seen), _fmt(tot_correct / seen), _fmt(test_acc), f"{wall:.3f}")
        with open(metrics_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(row)
        log(f"epoch {epoch + 1}/{epochs} loss {tot_loss / seen:.4f} train_acc {tot_correct / seen:.4f} "
            f"test_acc {test_acc:.4f} lr {adam.lr:g} [{time.perf_counter() - start:.0f}s]")
        if test_acc > best:
            best = test_acc
            checkpoint.save(best_path, model, adam)
    checkpoint.save(last_path, model, adam)
    return {"epochs": epochs, "best_test_acc": best, "final_test_acc": test_acc,
            "params": model.num_params(), "checkpoint": best_path, "metrics": metrics_path,
            "seconds": time.perf_counter() - start}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(io.StringIO(f.read())))


def load_model(rc: RunConfig, ckpt_path) -> Model:
    model = build_classifier(rc.model, seed=rc["model.seed"])
    checkpoint.load(ckpt_path, model)
    return model


def evaluate(rc: RunConfig, ckpt_path, split: Split | None = None) -> float:
    model = load_model(rc, ckpt_path)
    return accuracy(model, split or prepare_split(rc, "test"))
