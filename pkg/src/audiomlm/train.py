"""Training loops and the encoder/tokenizer iteration driver.

Determinism is functional: the batch plan is a pure function of (seed, epoch),
per-step mask draws of (seed, step), and model init of (seed, stage), so a
resumed run replays the exact step sequence of an uninterrupted one.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint, verify_config_hash
from .codebook import (
    Codebook,
    RandomProjectionTokenizer,
    ema_update,
    kmeans_init,
    perplexity,
    quantize_batch,
    write_token_dump,
)
from .config import EncoderConfig
from .data import Featurizer, Manifest, PatchBatch, epoch_batches, load_manifest, ensure_mel_stats
from .distill import (
    LearnedTokenizer,
    TokenizerEncoder,
    TokenizerNetConfig,
    TokenizerPredictor,
    distill_step_graph,
    mean_teacher_cosine,
)
from .encoder import EncoderModel, mlm_loss, mlm_metrics
from .errors import ContractError, PlanError
from .optim import AdamW, lr_at
from .patches import sample_mask
from .tensor import Tensor
from . import audio

# stream tags for deriving independent RNGs from the run seed
_STREAMS = {
    "encoder-init": 11,
    "tokenizer-init": 12,
    "random-tokenizer": 13,
    "mask": 14,
    "ema-reseed": 15,
    "kmeans": 16,
    "eval-mask": 17,
}


def derive_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[stream], *extra]))


def _append_log(path: Path, row: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(row) + "\n")


def batch_masks(
    batch: PatchBatch, mask_ratio: float, rng: np.random.Generator
) -> np.ndarray:
    """Per-clip uniform masks assembled into a (B, N) bool array."""
    masked = np.zeros(batch.valid.shape, dtype=bool)
    for i, n in enumerate(batch.n_patches):
        spec = sample_mask(n, mask_ratio, rng)
        masked[i, spec.masked] = True
    return masked


def tokens_to_batch(batch: PatchBatch, token_lookup: dict[str, np.ndarray]) -> np.ndarray:
    tokens = np.zeros(batch.valid.shape, dtype=np.int64)
    for i, (utt_id, n) in enumerate(zip(batch.ids, batch.n_patches)):
        tokens[i, :n] = token_lookup[utt_id][:n]
    return tokens


def tokenize_corpus_random(
    manifest: Manifest, featurizer: Featurizer, tokenizer: RandomProjectionTokenizer
) -> dict[str, np.ndarray]:
    return {
        row.id: tokenizer.tokenize(featurizer.patch_sequence(row).patches).astype(np.uint32)
        for row in manifest.rows
    }


def tokenize_corpus_learned(
    manifest: Manifest, featurizer: Featurizer, tokenizer: LearnedTokenizer
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for row in manifest.rows:
        seq = featurizer.patch_sequence(row)
        n = len(seq)
        from .patches import patch_position_ids

        t_ids, f_ids = patch_position_ids(n)
        tokens = tokenizer.tokenize(
            seq.patches[None, :, :], t_ids[None, :], f_ids[None, :], np.ones((1, n), bool)
        )
        out[row.id] = tokens[0].astype(np.uint32)
    return out


# -- encoder pre-training ---------------------------------------------------------


def pretrain_encoder(
    config: dict,
    manifest: Manifest,
    featurizer: Featurizer,
    token_lookup: dict[str, np.ndarray],
    workdir: Path,
    stage_tag: int = 1,
) -> Path:
    """Masked-token-prediction training; resumable; returns the final checkpoint."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    final_path = workdir / "encoder.ckpt"
    latest_path = workdir / "latest.ckpt"
    log_path = workdir / "train.log.jsonl"
    if final_path.exists() and verify_config_hash(final_path, config):
        return final_path

    seed = int(config["seed"])
    tr = config["training"]
    enc_cfg = EncoderConfig.from_dict(config["encoder"])
    model = EncoderModel(enc_cfg, derive_rng(seed, "encoder-init", stage_tag))
    params = model.parameters()
    opt = AdamW(
        params,
        beta1=tr["beta1"],
        beta2=tr["beta2"],
        eps=tr["eps"],
        weight_decay=tr["weight_decay"],
    )

    step, epoch, batch_idx = 0, 0, 0
    if latest_path.exists() and verify_config_hash(latest_path, config):
        _, tensors, extra = load_checkpoint(latest_path)
        model.load_arrays(tensors, prefix="model.")
        opt.load_state(tensors, extra["opt_step"])
        step, epoch, batch_idx = extra["step"], extra["epoch"], extra["batch_idx"]

    total = int(tr["updates"])
    while step < total:
        batches, _ = epoch_batches(manifest, tr["batch_seconds"], seed, epoch)
        while batch_idx < len(batches) and step < total:
            t0 = time.perf_counter()
            step += 1
            batch = featurizer.collate(batches[batch_idx])
            masked = batch_masks(batch, tr["mask_ratio"], derive_rng(seed, "mask", stage_tag, step))
            masked &= batch.valid
            tokens = tokens_to_batch(batch, token_lookup)

            model.zero_grad()
            logits, _ = model.forward(
                batch.patches, batch.time_ids, batch.freq_ids, valid=batch.valid, masked=masked
            )
            n_masked = int(masked.sum())
            loss = mlm_loss(logits, tokens, masked) * (1.0 / n_masked)
            T.backward(loss)
            lr = lr_at(step, tr["warmup"], tr["peak_lr"], total, tr["decay_shape"])
            opt.step(lr)

            acc, cov = mlm_metrics(logits.data, tokens, masked, batch.valid)
            if step % tr["log_every"] == 0 or step == total:
                _append_log(
                    log_path,
                    {
                        "step": step,
                        "loss": float(loss.item()),
                        "masked_acc": acc,
                        "vocab_coverage": cov,
                        "lr": lr,
                        "wall_ms": (time.perf_counter() - t0) * 1000.0,
                    },
                )
            batch_idx += 1
            if step % tr["checkpoint_every"] == 0 and step < total:
                _save_encoder_state(latest_path, config, model, opt, step, epoch, batch_idx)
        if batch_idx >= len(batches):
            epoch += 1
            batch_idx = 0

    save_checkpoint(
        final_path,
        config,
        {f"model.{k}": p.data for k, p in params.items()},
        extra={"step": step, "stage_tag": stage_tag},
    )
    return final_path


def _save_encoder_state(path, config, model, opt, step, epoch, batch_idx):
    tensors = {f"model.{k}": p.data for k, p in model.parameters().items()}
    tensors.update(opt.state_arrays())
    save_checkpoint(
        path,
        config,
        tensors,
        extra={"step": step, "epoch": epoch, "batch_idx": batch_idx, "opt_step": opt.step_count},
    )


def encoder_from_checkpoint(path) -> tuple[EncoderModel, dict]:
    config, tensors, _ = load_checkpoint(path)
    model = EncoderModel(EncoderConfig.from_dict(config["encoder"]), np.random.default_rng(0))
    model.load_arrays(tensors, prefix="model.")
    return model, config


# -- tokenizer training -------------------------------------------------------------


def _tokenizer_net_config(config: dict) -> TokenizerNetConfig:
    enc = config["encoder"]
    tok = config["tokenizer"]
    return TokenizerNetConfig(
        width=enc["hidden"],
        ffn=enc["ffn"],
        layers=tok["layers"],
        heads=enc["heads"],
        predictor_layers=tok["predictor_layers"],
        codebook_size=enc["codebook_size"],
        patch_dim=enc["patch_dim"],
        max_time_patches=enc["max_time_patches"],
    )


def _teacher_embeddings(teacher: EncoderModel, batch: PatchBatch) -> np.ndarray:
    emb, _ = teacher.extract(batch.patches, batch.time_ids, batch.freq_ids, batch.valid)
    return emb


def train_tokenizer_stage(
    config: dict,
    manifest: Manifest,
    featurizer: Featurizer,
    teacher_ckpt: Path,
    workdir: Path,
    stage_tag: int = 2,
) -> Path:
    """Distill the previous-iteration encoder into a quantizing tokenizer."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    final_path = workdir / "tokenizer.ckpt"
    latest_path = workdir / "tokenizer.latest.ckpt"
    log_path = workdir / "tokenizer.log.jsonl"
    if final_path.exists() and verify_config_hash(final_path, config):
        return final_path

    teacher, _ = encoder_from_checkpoint(teacher_ckpt)
    seed = int(config["seed"])
    tok = config["tokenizer"]
    net_cfg = _tokenizer_net_config(config)
    init_rng = derive_rng(seed, "tokenizer-init", stage_tag)
    encoder = TokenizerEncoder(net_cfg, init_rng)
    predictor = TokenizerPredictor(net_cfg, init_rng)
    params = {f"enc.{k}": v for k, v in encoder.parameters().items()}
    params.update({f"pred.{k}": v for k, v in predictor.parameters().items()})
    tr = config["training"]
    opt = AdamW(params, beta1=tr["beta1"], beta2=tr["beta2"], eps=tr["eps"], weight_decay=tr["weight_decay"])

    step, epoch, batch_idx = 0, 0, 0
    codebook: Codebook | None = None
    if latest_path.exists() and verify_config_hash(latest_path, config):
        _, tensors, extra = load_checkpoint(latest_path)
        encoder.load_arrays(tensors, prefix="model.enc.")
        predictor.load_arrays(tensors, prefix="model.pred.")
        opt.load_state(tensors, extra["opt_step"])
        codebook = _codebook_from_tensors(tensors, tok["ema_decay"])
        step, epoch, batch_idx = extra["step"], extra["epoch"], extra["batch_idx"]

    if codebook is None:
        codebook = _kmeans_codebook(
            config, manifest, featurizer, encoder, derive_rng(seed, "kmeans", stage_tag)
        )

    total = int(tok["updates"])
    while step < total:
        batches, _ = epoch_batches(manifest, tok["batch_seconds"], seed, epoch)
        while batch_idx < len(batches) and step < total:
            t0 = time.perf_counter()
            step += 1
            batch = featurizer.collate(batches[batch_idx])
            teacher_out = _teacher_embeddings(teacher, batch)

            encoder.zero_grad()
            predictor.zero_grad()
            loss, stats = distill_step_graph(
                encoder,
                predictor,
                codebook,
                batch.patches,
                batch.time_ids,
                batch.freq_ids,
                batch.valid,
                teacher_out,
            )
            loss = loss * (1.0 / stats["n_valid"])
            T.backward(loss)
            lr = lr_at(step, tok["warmup"], tok["peak_lr"], total, tr["decay_shape"])
            opt.step(lr)
            ema_update(
                codebook,
                stats["vectors"],
                stats["assignments"],
                derive_rng(seed, "ema-reseed", stage_tag, step),
            )

            if step % tr["log_every"] == 0 or step == total:
                _append_log(
                    log_path,
                    {
                        "step": step,
                        "loss": float(loss.item()),
                        "perplexity": perplexity(stats["assignments"], codebook.size),
                        "teacher_cos": stats["teacher_cos"],
                        "lr": lr,
                        "wall_ms": (time.perf_counter() - t0) * 1000.0,
                    },
                )
            batch_idx += 1
            if step % tr["checkpoint_every"] == 0 and step < total:
                _save_tokenizer_state(
                    latest_path, config, encoder, predictor, codebook, opt, step, epoch, batch_idx
                )
        if batch_idx >= len(batches):
            epoch += 1
            batch_idx = 0

    tensors = _tokenizer_tensors(encoder, predictor, codebook)
    save_checkpoint(final_path, config, tensors, extra={"step": step, "ema_decay": codebook.decay})
    return final_path


def _kmeans_codebook(config, manifest, featurizer, encoder, rng) -> Codebook:
    tok = config["tokenizer"]
    target = int(tok["kmeans_samples"])
    vectors = []
    count = 0
    for rows in epoch_batches(manifest, tok["batch_seconds"], int(config["seed"]), 0)[0]:
        batch = featurizer.collate(rows)
        with T.no_grad():
            emb = encoder(batch.patches, batch.time_ids, batch.freq_ids, batch.valid).data
        flat = emb.reshape(-1, emb.shape[-1])[batch.valid.reshape(-1)]
        vectors.append(flat)
        count += flat.shape[0]
        if count >= target:
            break
    samples = np.concatenate(vectors, axis=0)[:target]
    return kmeans_init(samples, config["encoder"]["codebook_size"], rng, decay=tok["ema_decay"])


def _tokenizer_tensors(encoder, predictor, codebook) -> dict[str, np.ndarray]:
    tensors = {f"model.enc.{k}": p.data for k, p in encoder.parameters().items()}
    tensors.update({f"model.pred.{k}": p.data for k, p in predictor.parameters().items()})
    tensors["codebook.codewords"] = codebook.codewords
    tensors["codebook.ema_counts"] = codebook.ema_counts
    tensors["codebook.ema_sums"] = codebook.ema_sums
    tensors["codebook.stale"] = codebook.stale.astype(np.float32)
    return tensors


def _save_tokenizer_state(path, config, encoder, predictor, codebook, opt, step, epoch, batch_idx):
    tensors = _tokenizer_tensors(encoder, predictor, codebook)
    tensors.update(opt.state_arrays())
    save_checkpoint(
        path,
        config,
        tensors,
        extra={"step": step, "epoch": epoch, "batch_idx": batch_idx, "opt_step": opt.step_count},
    )


def _codebook_from_tensors(tensors: dict[str, np.ndarray], decay: float) -> Codebook:
    return Codebook(
        codewords=tensors["codebook.codewords"].copy(),
        ema_counts=tensors["codebook.ema_counts"].copy(),
        ema_sums=tensors["codebook.ema_sums"].copy(),
        decay=decay,
        stale=tensors["codebook.stale"].astype(np.int32),
    )


def tokenizer_from_checkpoint(path) -> tuple[LearnedTokenizer, dict]:
    config, tensors, extra = load_checkpoint(path)
    net_cfg = _tokenizer_net_config(config)
    rng = np.random.default_rng(0)
    encoder = TokenizerEncoder(net_cfg, rng)
    predictor = TokenizerPredictor(net_cfg, rng)
    encoder.load_arrays(tensors, prefix="model.enc.")
    predictor.load_arrays(tensors, prefix="model.pred.")
    codebook = _codebook_from_tensors(tensors, extra.get("ema_decay", config["tokenizer"]["ema_decay"]))
    return LearnedTokenizer(encoder, predictor, codebook, net_cfg), config


# -- evaluation passes ---------------------------------------------------------------


def evaluate_mlm(
    model: EncoderModel,
    token_lookup: dict[str, np.ndarray],
    featurizer: Featurizer,
    rows,
    mask_ratio: float,
    seed: int,
    batch_clips: int = 16,
) -> dict:
    """Deterministic held-out MLM metrics (per-masked-position loss, accuracy)."""
    total_loss, total_masked, accs, covs = 0.0, 0, [], []
    for i in range(0, len(rows), batch_clips):
        batch = featurizer.collate(rows[i : i + batch_clips])
        masked = batch_masks(batch, mask_ratio, derive_rng(seed, "eval-mask", i))
        masked &= batch.valid
        tokens = tokens_to_batch(batch, token_lookup)
        with T.no_grad():
            logits, _ = model.forward(
                batch.patches, batch.time_ids, batch.freq_ids, valid=batch.valid, masked=masked
            )
            loss = mlm_loss_value(logits.data, tokens, masked)
        total_loss += loss
        total_masked += int(masked.sum())
        acc, cov = mlm_metrics(logits.data, tokens, masked, batch.valid)
        accs.append(acc)
        covs.append(cov)
    return {
        "loss_per_masked": total_loss / total_masked,
        "masked_acc": float(np.mean(accs)),
        "vocab_coverage": float(np.mean(covs)),
    }


def mlm_loss_value(logits: np.ndarray, tokens: np.ndarray, masked: np.ndarray) -> float:
    """Numpy-only summed masked cross entropy (no graph), for eval passes."""
    sel = logits[masked]
    tok = tokens[masked]
    z = sel - sel.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((lse - z[np.arange(sel.shape[0]), tok]).sum())


def evaluate_tokenizer_cosine(
    tokenizer: LearnedTokenizer,
    teacher: EncoderModel,
    featurizer: Featurizer,
    rows,
    batch_clips: int = 16,
) -> float:
    """Mean predictor-vs-teacher cosine over the given rows."""
    cos, weights = [], []
    for i in range(0, len(rows), batch_clips):
        batch = featurizer.collate(rows[i : i + batch_clips])
        teacher_out = _teacher_embeddings(teacher, batch)
        with T.no_grad():
            emb = tokenizer.encoder(batch.patches, batch.time_ids, batch.freq_ids, batch.valid)
            b, n, p = emb.data.shape
            z = quantize_batch(emb.data.reshape(-1, p), tokenizer.codebook)
            q = tokenizer.codebook.codewords[z].reshape(b, n, p)
            pred = tokenizer.predictor(
                Tensor(q), batch.time_ids, batch.freq_ids, batch.valid
            ).data
        v = batch.valid.reshape(-1)
        cos.append(
            mean_teacher_cosine(pred.reshape(-1, p)[v], teacher_out.reshape(-1, p)[v])
        )
        weights.append(int(v.sum()))
    return float(np.average(cos, weights=weights))


# -- iteration driver -----------------------------------------------------------------


def run_iteration_plan(config: dict, manifest_path, workdir) -> dict[str, Path]:
    """Alternate encoder and tokenizer training for R iterations.

    Iteration 1 trains an encoder against random-projection tokens; every later
    iteration distills the previous encoder into a learned tokenizer, re-tokenizes
    the corpus, and trains a fresh encoder on those tokens.
    """
    iterations = int(config["plan"]["iterations"])
    if not 1 <= iterations <= 3:
        raise ContractError(f"iteration count must lie in [1,3], got {iterations}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(manifest_path)
    stats = ensure_mel_stats(manifest_path, manifest)
    mean, std = audio.load_stats(stats)
    featurizer = Featurizer(manifest, mean, std)
    seed = int(config["seed"])
    enc = config["encoder"]

    artifacts: dict[str, Path] = {}
    iter1 = workdir / "iter1"
    iter1.mkdir(parents=True, exist_ok=True)
    rproj = RandomProjectionTokenizer.create(
        int(derive_rng(seed, "random-tokenizer").integers(2**31)),
        enc["patch_dim"],
        enc["hidden"],
        enc["codebook_size"],
    )
    token_bin, token_json = iter1 / "tokens.bin", iter1 / "tokens.json"
    if not (token_bin.exists() and token_json.exists()):
        tokens = tokenize_corpus_random(manifest, featurizer, rproj)
        write_token_dump(
            token_bin, token_json, tokens, rproj.codebook.content_hash(),
            {"tokenizer": "random-projection", "seed": rproj.seed},
        )
    from .codebook import read_token_dump

    token_lookup, _ = read_token_dump(token_bin, token_json)
    artifacts["E1"] = pretrain_encoder(config, manifest, featurizer, token_lookup, iter1, stage_tag=1)

    for r in range(2, iterations + 1):
        iterdir = workdir / f"iter{r}"
        iterdir.mkdir(parents=True, exist_ok=True)
        teacher_ckpt = workdir / f"iter{r - 1}" / "encoder.ckpt"
        if not teacher_ckpt.exists():
            raise PlanError(f"iteration {r} needs encoder stage iter{r - 1} at {teacher_ckpt}")
        tok_ckpt = train_tokenizer_stage(
            config, manifest, featurizer, teacher_ckpt, iterdir, stage_tag=r
        )
        artifacts[f"T{r}"] = tok_ckpt
        tokenizer, _ = tokenizer_from_checkpoint(tok_ckpt)
        token_bin, token_json = iterdir / "tokens.bin", iterdir / "tokens.json"
        if not (token_bin.exists() and token_json.exists()):
            tokens = tokenize_corpus_learned(manifest, featurizer, tokenizer)
            write_token_dump(
                token_bin, token_json, tokens, tokenizer.codebook.content_hash(),
                {"tokenizer": "learned", "iteration": r},
            )
        token_lookup, _ = read_token_dump(token_bin, token_json)
        artifacts[f"E{r}"] = pretrain_encoder(
            config, manifest, featurizer, token_lookup, iterdir, stage_tag=r
        )
    return artifacts
