"""Command-line entry point.

Subcommands: pretrain, train-tokenizer, iterate, probe, finetune, extract,
inspect-codebook, synth-corpus, manifest. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric abort. ``OBEATS_WORKDIR`` supplies the default
artifact root; config precedence is flags > config file > preset.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audiomlm", description=__doc__)
    parser.add_argument("--human", action="store_true", help="pretty summaries instead of JSON")
    parser.add_argument("--threads", type=int, default=None, help="cap math library threads")
    parser.add_argument("--workers", type=int, default=0, help="decode worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest_required=True):
        p.add_argument("--preset", default="tiny", help="tiny | base | large")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workdir", default=None, help="artifact root (or $OBEATS_WORKDIR)")
        p.add_argument("--manifest", required=manifest_required)

    p = sub.add_parser("pretrain", help="train an encoder with masked token prediction")
    common(p)
    p.add_argument("--tokenizer", default="random",
                   help='"random" or a learned tokenizer checkpoint path')

    p = sub.add_parser("train-tokenizer", help="distill a teacher encoder into a tokenizer")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher encoder checkpoint")

    p = sub.add_parser("iterate", help="run the full R-iteration plan")
    common(p)
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("probe", help="linear probe on frozen encoder features")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("finetune", help="fine-tune encoder + classification head")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("extract", help="dump per-utterance embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="output prefix (default <workdir>/embeddings)")

    p = sub.add_parser("inspect-codebook", help="codebook usage/perplexity report")
    common(p, manifest_required=False)
    p.add_argument("--tokenizer", default="random",
                   help='"random" or a learned tokenizer checkpoint path')

    p = sub.add_parser("synth-corpus", help="generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="tone-sequence",
                   choices=["tone-sequence", "filtered-noise-classes", "cluster-patterned"])
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("manifest", help="build a JSONL manifest from a WAV directory")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)

    return parser


def _resolve_workdir(args) -> Path:
    workdir = args.workdir or os.environ.get("OBEATS_WORKDIR") or "workdir"
    return Path(workdir)


def _emit(args, payload: dict) -> None:
    if args.human:
        for k, v in payload.items():
            print(f"{k}: {v}")
    else:
        print(json.dumps(payload))


def _checkpoint_hash(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_run(args):
    from .config import resolve_config, save_resolved

    config = resolve_config(args.preset, args.config, args.overrides, args.seed)
    workdir = _resolve_workdir(args)
    workdir.mkdir(parents=True, exist_ok=True)
    save_resolved(config, workdir)
    return config, workdir


def _featurizer_for(args, config):
    from . import audio
    from .data import Featurizer, ensure_mel_stats, load_manifest

    manifest = load_manifest(args.manifest)
    stats = ensure_mel_stats(args.manifest, manifest)
    mean, std = audio.load_stats(stats)
    return manifest, Featurizer(manifest, mean, std, workers=args.workers)


def _cmd_pretrain(args) -> int:
    from .codebook import RandomProjectionTokenizer, read_token_dump, write_token_dump
    from .train import (
        derive_rng,
        pretrain_encoder,
        tokenize_corpus_learned,
        tokenize_corpus_random,
        tokenizer_from_checkpoint,
    )

    config, workdir = _load_run(args)
    manifest, featurizer = _featurizer_for(args, config)
    enc = config["encoder"]
    token_bin, token_json = workdir / "tokens.bin", workdir / "tokens.json"
    if not (token_bin.exists() and token_json.exists()):
        if args.tokenizer == "random":
            rproj = RandomProjectionTokenizer.create(
                int(derive_rng(config["seed"], "random-tokenizer").integers(2**31)),
                enc["patch_dim"], enc["hidden"], enc["codebook_size"],
            )
            tokens = tokenize_corpus_random(manifest, featurizer, rproj)
            meta = {"tokenizer": "random-projection", "seed": rproj.seed}
            cb_hash = rproj.codebook.content_hash()
        else:
            tokenizer, _ = tokenizer_from_checkpoint(args.tokenizer)
            tokens = tokenize_corpus_learned(manifest, featurizer, tokenizer)
            meta = {"tokenizer": "learned", "source": str(args.tokenizer)}
            cb_hash = tokenizer.codebook.content_hash()
        write_token_dump(token_bin, token_json, tokens, cb_hash, meta)
    token_lookup, _ = read_token_dump(token_bin, token_json)
    ckpt = pretrain_encoder(config, manifest, featurizer, token_lookup, workdir)
    _emit(args, {"checkpoint": str(ckpt), "log": str(workdir / "train.log.jsonl")})
    return EXIT_OK


def _cmd_train_tokenizer(args) -> int:
    from .train import train_tokenizer_stage

    config, workdir = _load_run(args)
    manifest, featurizer = _featurizer_for(args, config)
    ckpt = train_tokenizer_stage(config, manifest, featurizer, Path(args.teacher), workdir)
    _emit(args, {"tokenizer": str(ckpt), "log": str(workdir / "tokenizer.log.jsonl")})
    return EXIT_OK


def _cmd_iterate(args) -> int:
    from .train import run_iteration_plan

    config, workdir = _load_run(args)
    if args.iterations is not None:
        config["plan"]["iterations"] = args.iterations
    artifacts = run_iteration_plan(config, args.manifest, workdir)
    _emit(args, {k: str(v) for k, v in sorted(artifacts.items())})
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .evaluate import append_result, make_probe_task, pooled_features, probe_over_seeds
    from .train import encoder_from_checkpoint

    config, workdir = _load_run(args)
    manifest, featurizer = _featurizer_for(args, config)
    model, _ = encoder_from_checkpoint(args.checkpoint)
    task = make_probe_task(manifest)
    features = pooled_features(model, featurizer, task.rows, pooling=config["probe"]["pooling"])
    mean_value, values = probe_over_seeds(features, task, config["probe"], config["probe"]["seeds"])
    ckpt_hash = _checkpoint_hash(args.checkpoint)
    results = workdir / "results.jsonl"
    for seed, value in enumerate(values):
        append_result(results, f"probe:{Path(args.manifest).stem}", task.metric, value, seed, ckpt_hash)
    append_result(results, f"probe:{Path(args.manifest).stem}:mean", task.metric, mean_value, -1, ckpt_hash)
    _emit(args, {"metric": task.metric, "value": mean_value, "results": str(results)})
    return EXIT_OK


def _cmd_finetune(args) -> int:
    from .evaluate import append_result, finetune_classifier, make_probe_task
    from .train import encoder_from_checkpoint

    config, workdir = _load_run(args)
    manifest, featurizer = _featurizer_for(args, config)
    model, _ = encoder_from_checkpoint(args.checkpoint)
    task = make_probe_task(manifest)
    value, detail = finetune_classifier(model, featurizer, task, config["finetune"], seed=config["seed"])
    results = workdir / "results.jsonl"
    append_result(results, f"finetune:{Path(args.manifest).stem}", task.metric, value,
                  config["seed"], _checkpoint_hash(args.checkpoint))
    _emit(args, {"metric": task.metric, "value": value, **detail, "results": str(results)})
    return EXIT_OK


def _cmd_extract(args) -> int:
    from .encoder import write_embedding_dump
    from .train import encoder_from_checkpoint

    config, workdir = _load_run(args)
    manifest, featurizer = _featurizer_for(args, config)
    model, _ = encoder_from_checkpoint(args.checkpoint)
    prefix = Path(args.out) if args.out else workdir / "embeddings"
    embeddings = {}
    for row in manifest.rows:
        seq = featurizer.patch_sequence(row)
        from .patches import patch_position_ids

        t_ids, f_ids = patch_position_ids(len(seq))
        emb, _ = model.extract(seq.patches[None], t_ids[None], f_ids[None])
        embeddings[row.id] = emb[0]
    bin_path, index_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    write_embedding_dump(bin_path, index_path, embeddings)
    _emit(args, {"embeddings": str(bin_path), "index": str(index_path)})
    return EXIT_OK


def _cmd_inspect_codebook(args) -> int:
    import numpy as np

    from .audio import SAMPLE_RATE, MelSpectrogram, mel_spectrogram, Waveform
    from .codebook import (
        RandomProjectionTokenizer,
        coverage,
        nearest_neighbor_margins,
        perplexity,
    )
    from .patches import patchify
    from .train import derive_rng, tokenizer_from_checkpoint

    config, workdir = _load_run(args)
    enc = config["encoder"]

    if args.manifest:
        manifest, featurizer = _featurizer_for(args, config)
        patch_list = [featurizer.patch_sequence(r).patches for r in manifest.rows]
    else:
        rng = np.random.default_rng(config["seed"])
        patch_list = []
        for _ in range(16):
            noise = 0.25 * rng.standard_normal(2 * SAMPLE_RATE)
            mel = mel_spectrogram(Waveform(noise.astype(np.float32), SAMPLE_RATE))
            frames = (mel.frames - mel.frames.mean(axis=0)) / np.maximum(mel.frames.std(axis=0), 1e-3)
            patch_list.append(patchify(MelSpectrogram(frames=frames)).patches)
    patches = np.concatenate(patch_list, axis=0)

    if args.tokenizer == "random":
        tok = RandomProjectionTokenizer.create(
            int(derive_rng(config["seed"], "random-tokenizer").integers(2**31)),
            enc["patch_dim"], enc["hidden"], enc["codebook_size"],
        )
        assignments = tok.tokenize(patches)
        codebook = tok.codebook
        embeddings = patches @ tok.projection
    else:
        tokenizer, _ = tokenizer_from_checkpoint(args.tokenizer)
        from .patches import patch_position_ids

        n = patches.shape[0]
        t_ids, f_ids = patch_position_ids(n)
        embeddings = tokenizer.embed(patches[None], t_ids[None], f_ids[None])[0]
        assignments = tokenizer.tokenize(patches[None], t_ids[None], f_ids[None])[0]
        codebook = tokenizer.codebook

    margins = nearest_neighbor_margins(embeddings.reshape(-1, codebook.width), codebook)
    hist = np.bincount(assignments.reshape(-1), minlength=codebook.size)
    report = {
        "codebook_size": codebook.size,
        "perplexity": perplexity(assignments.reshape(-1), codebook.size),
        "coverage": coverage(assignments.reshape(-1), codebook.size),
        "used_entries": int((hist > 0).sum()),
        "usage_histogram": hist.tolist(),
        "margin_mean": float(margins.mean()),
        "margin_median": float(np.median(margins)),
        "codebook_hash": codebook.content_hash(),
    }
    out = workdir / "codebook_report.json"
    out.write_text(json.dumps(report, indent=2))
    summary = {k: report[k] for k in
               ("codebook_size", "perplexity", "coverage", "used_entries", "margin_mean")}
    _emit(args, {**summary, "report": str(out)})
    return EXIT_OK


def _cmd_synth_corpus(args) -> int:
    from .data import SyntheticCorpusSpec, generate_synthetic

    spec = SyntheticCorpusSpec(
        n_clips=args.clips,
        clip_seconds=args.seconds,
        kind=args.kind,
        classes=args.classes,
        seed=args.seed,
    )
    manifest_path = generate_synthetic(spec, args.out)
    _emit(args, {"manifest": str(manifest_path)})
    return EXIT_OK


def _cmd_manifest(args) -> int:
    from .data import build_manifest, save_manifest

    manifest, skipped = build_manifest(args.root)
    out = save_manifest(manifest, args.out)
    _emit(args, {"manifest": str(out), "rows": len(manifest), "skipped": skipped})
    return EXIT_OK


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "train-tokenizer": _cmd_train_tokenizer,
    "iterate": _cmd_iterate,
    "probe": _cmd_probe,
    "finetune": _cmd_finetune,
    "extract": _cmd_extract,
    "inspect-codebook": _cmd_inspect_codebook,
    "synth-corpus": _cmd_synth_corpus,
    "manifest": _cmd_manifest,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.threads is not None and "numpy" not in sys.modules:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import (
        AudioFormatError,
        CheckpointError,
        ConfigError,
        ContractError,
        DataError,
        NumericError,
        PlanError,
        TooShortError,
    )

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, AudioFormatError, TooShortError, CheckpointError, PlanError,
            ContractError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
