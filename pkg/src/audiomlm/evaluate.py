"""Downstream evaluation: linear probing on frozen features, full fine-tuning
with a classification head, and accuracy/mAP metrics with results logging."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Featurizer, Manifest, label_space
from .encoder import EncoderModel
from .errors import ContractError, DataError
from .nn import Linear
from .optim import AdamW
from .tensor import Tensor


@dataclass
class ProbeTask:
    rows: list  # labeled manifest rows
    mode: str  # "single" | "multi"
    metric: str  # "accuracy" | "mAP"
    classes: list[str]

    def label_matrix(self) -> np.ndarray:
        """(n, C) multi-hot for multi-label, or (n,) class indices for single."""
        index = {c: i for i, c in enumerate(self.classes)}
        if self.mode == "single":
            return np.array([index[r.label] for r in self.rows], dtype=np.int64)
        out = np.zeros((len(self.rows), len(self.classes)), dtype=np.float32)
        for i, r in enumerate(self.rows):
            labels = r.label if isinstance(r.label, list) else [r.label]
            for lab in labels:
                out[i, index[lab]] = 1.0
        return out


def make_probe_task(manifest: Manifest) -> ProbeTask:
    rows = [r for r in manifest.rows if r.label is not None]
    if not rows:
        raise DataError("manifest has no labeled rows")
    classes = label_space(manifest)
    multi = any(isinstance(r.label, list) for r in rows)
    return ProbeTask(
        rows=rows,
        mode="multi" if multi else "single",
        metric="mAP" if multi else "accuracy",
        classes=classes,
    )


def split_indices(
    labels, n: int, seed: int, fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic stratified train/val/test split."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    keys = [str(l) for l in labels]
    by_class: dict[str, list[int]] = {}
    for i, key in enumerate(keys):
        by_class.setdefault(key, []).append(i)
    train, val, test = [], [], []
    for key in sorted(by_class):
        idx = np.array(by_class[key])
        idx = idx[rng.permutation(idx.size)]
        n_train = min(max(int(round(fractions[0] * idx.size)), 1), idx.size)
        remaining = idx.size - n_train
        n_test = (remaining + 1) // 2
        n_val = remaining - n_test
        train.extend(idx[:n_train])
        val.extend(idx[n_train : n_train + n_val])
        test.extend(idx[n_train + n_val :])
    return (
        np.array(sorted(train), dtype=np.int64),
        np.array(sorted(val), dtype=np.int64),
        np.array(sorted(test), dtype=np.int64),
    )


# -- metrics -------------------------------------------------------------------


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return float((predictions == labels).mean())


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Ranked precision averaged over the positives of one class."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    ranked = np.asarray(labels)[order].astype(bool)
    if not ranked.any():
        raise ContractError("average_precision needs at least one positive")
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    return float((hits[ranked] / ranks[ranked]).mean())


def per_class_average_precision(
    scores: np.ndarray, labels: np.ndarray
) -> tuple[dict[int, float], list[int]]:
    """AP per class plus the list of skipped (zero-positive) classes."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    aps: dict[int, float] = {}
    skipped: list[int] = []
    for c in range(scores.shape[1]):
        if labels[:, c].sum() == 0:
            skipped.append(c)
            continue
        aps[c] = average_precision(scores[:, c], labels[:, c])
    return aps, skipped


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro-averaged AP; classes without positives are skipped with a warning."""
    aps, skipped = per_class_average_precision(scores, labels)
    if skipped:
        warnings.warn(f"mAP skipped {len(skipped)} classes with no positives: {skipped}")
    if not aps:
        raise DataError("no class had a positive example")
    return float(np.mean(list(aps.values())))


# -- linear probe ----------------------------------------------------------------


def _standardize(train: np.ndarray, rest: list[np.ndarray]) -> list[np.ndarray]:
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), 1e-6)
    return [(x - mean) / std for x in [train, *rest]]


def _probe_metric(weights, bias, x, y, mode) -> float:
    logits = x @ weights + bias
    if mode == "single":
        return accuracy(logits.argmax(axis=1), y)
    return mean_average_precision(logits, y)


def linear_probe(
    features: np.ndarray,
    task: ProbeTask,
    config: dict,
    seed: int = 0,
) -> tuple[float, dict]:
    """Train a linear layer on frozen features; returns (test metric, detail).

    Single-label tasks use softmax cross entropy and accuracy; multi-label use
    per-class sigmoid BCE and mAP. Early stopping watches the validation metric.
    """
    x = np.asarray(features, dtype=np.float64)
    y = task.label_matrix()
    n, h = x.shape
    c = len(task.classes)
    train_idx, val_idx, test_idx = split_indices([str(r.label) for r in task.rows], n, seed)
    x_train, x_val, x_test = _standardize(x[train_idx], [x[val_idx], x[test_idx]])
    y_train, y_val, y_test = y[train_idx], y[val_idx], y[test_idx]

    w = T.parameter(np.zeros((h, c), dtype=np.float64), "probe.weight")
    b = T.parameter(np.zeros(c, dtype=np.float64), "probe.bias")
    opt = AdamW({"w": w, "b": b}, weight_decay=config.get("weight_decay", 1e-4))
    lr = config.get("lr", 0.05)
    patience = config.get("patience", 30)
    best = (-np.inf, None, None)
    stall = 0
    for epoch in range(config.get("epochs", 300)):
        w.zero_grad()
        b.zero_grad()
        logits = T.matmul(Tensor(x_train), w) + b
        if task.mode == "single":
            loss = T.softmax_cross_entropy(logits, y_train, reduction="mean")
        else:
            loss = T.sigmoid_bce_with_logits(logits, y_train, reduction="mean")
        T.backward(loss)
        opt.step(lr)
        if x_val.shape[0]:
            val_metric = _probe_metric(w.data, b.data, x_val, y_val, task.mode)
        else:
            val_metric = -float(loss.item())
        if val_metric > best[0] + 1e-12:
            best = (val_metric, w.data.copy(), b.data.copy())
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    w_best, b_best = best[1], best[2]
    if test_idx.size == 0:
        raise DataError("probe split produced an empty test set; need more labeled rows")
    test_metric = _probe_metric(w_best, b_best, x_test, y_test, task.mode)
    detail = {"val_metric": best[0], "epochs_run": epoch + 1, "test_size": int(test_idx.size)}
    return float(test_metric), detail


def probe_over_seeds(features, task, config, seeds: int = 3) -> tuple[float, list[float]]:
    values = [linear_probe(features, task, config, seed=s)[0] for s in range(seeds)]
    return float(np.mean(values)), values


# -- feature extraction -----------------------------------------------------------


def pooled_features(
    model: EncoderModel,
    featurizer: Featurizer,
    rows,
    pooling: str = "mean",
    batch_clips: int = 16,
) -> np.ndarray:
    """(n, h) pooled frozen embeddings for probe/finetune heads."""
    out = []
    for i in range(0, len(rows), batch_clips):
        batch = featurizer.collate(rows[i : i + batch_clips])
        emb, pooled = model.extract(batch.patches, batch.time_ids, batch.freq_ids, batch.valid)
        if pooling == "mean":
            out.append(pooled)
        elif pooling == "max":
            masked = np.where(batch.valid[..., None], emb, -np.inf)
            out.append(masked.max(axis=1))
        else:
            raise ContractError(f"unknown pooling {pooling!r}")
    return np.concatenate(out, axis=0)


def raw_mel_features(featurizer: Featurizer, rows) -> np.ndarray:
    """Time-averaged normalized log-mel spectrum per clip: the no-encoder baseline."""
    from .audio import load_wav, mel_spectrogram, normalize_frames

    out = []
    for r in rows:
        mel = mel_spectrogram(load_wav(featurizer.manifest.resolve(r)))
        out.append(normalize_frames(mel.frames, featurizer.mean, featurizer.std).mean(axis=0))
    return np.stack(out, axis=0)


# -- fine-tuning --------------------------------------------------------------------


def finetune_classifier(
    model: EncoderModel,
    featurizer: Featurizer,
    task: ProbeTask,
    config: dict,
    seed: int = 0,
) -> tuple[float, dict]:
    """Unfreeze the encoder and train it with a fresh linear head.

    The head trains at ``head_lr``; encoder parameters at ``head_lr *
    encoder_lr_scale``. Early stopping on the validation metric; returns the
    test metric of the best-validation epoch.
    """
    rows = task.rows
    y = task.label_matrix()
    train_idx, val_idx, test_idx = split_indices([str(r.label) for r in rows], len(rows), seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17E]))
    head = Linear(model.config.hidden, len(task.classes), rng)
    head_params = {f"head.{k}": v for k, v in head.parameters().items()}
    enc_params = {f"enc.{k}": v for k, v in model.parameters().items()}
    head_opt = AdamW(head_params)
    enc_opt = AdamW(enc_params)
    head_lr = config.get("head_lr", 1e-3)
    enc_lr = head_lr * config.get("encoder_lr_scale", 0.1)
    batch_clips = config.get("batch_clips", 16)
    epochs = config.get("epochs", 10)

    def forward_pooled(batch) -> Tensor:
        _, emb = model.forward(batch.patches, batch.time_ids, batch.freq_ids, valid=batch.valid)
        weights = batch.valid.astype(np.float32)[..., None]
        counts = weights.sum(axis=1, keepdims=True)
        pooled = T.tsum(emb * Tensor(weights), axis=1) * Tensor(1.0 / counts[:, 0, :])
        return head(pooled)

    def eval_metric(idx) -> float:
        if idx.size == 0:
            return 0.0
        logits_all = []
        for i in range(0, idx.size, batch_clips):
            batch = featurizer.collate([rows[j] for j in idx[i : i + batch_clips]])
            with T.no_grad():
                logits_all.append(forward_pooled(batch).data)
        logits = np.concatenate(logits_all, axis=0)
        if task.mode == "single":
            return accuracy(logits.argmax(axis=1), y[idx])
        return mean_average_precision(logits, y[idx])

    best_val, best_test = -np.inf, None
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))
    for _ in range(epochs):
        order = train_idx[order_rng.permutation(train_idx.size)]
        for i in range(0, order.size, batch_clips):
            chunk = order[i : i + batch_clips]
            batch = featurizer.collate([rows[j] for j in chunk])
            for p in (*head_params.values(), *enc_params.values()):
                p.zero_grad()
            logits = forward_pooled(batch)
            if task.mode == "single":
                loss = T.softmax_cross_entropy(logits, y[chunk], reduction="mean")
            else:
                loss = T.sigmoid_bce_with_logits(logits, y[chunk], reduction="mean")
            T.backward(loss)
            head_opt.step(head_lr)
            enc_opt.step(enc_lr)
        val_metric = eval_metric(val_idx) if val_idx.size else 0.0
        if val_metric >= best_val:
            best_val = val_metric
            best_test = eval_metric(test_idx)
    return float(best_test), {"val_metric": float(best_val)}


# -- results files ---------------------------------------------------------------


def append_result(path, task: str, metric: str, value: float, seed: int, checkpoint_hash: str) -> None:
    row = {
        "task": task,
        "metric": metric,
        "value": value,
        "seed": seed,
        "checkpoint_hash": checkpoint_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(row) + "\n")


def results_to_csv(jsonl_path, csv_path) -> Path:
    rows = [json.loads(line) for line in Path(jsonl_path).read_text().splitlines() if line.strip()]
    if not rows:
        raise DataError(f"no results in {jsonl_path}")
    fields = ["task", "metric", "value", "seed", "checkpoint_hash"]
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return Path(csv_path)
