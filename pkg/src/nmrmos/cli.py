"""Command-line entry point: ``nmrmos <subcommand> [options]``.

Machine-readable results are JSON lines (or CSV for embeddings) on stdout or
``--output``; the effective configuration and progress go to the log on
stderr. Every failure prints ``nmrmos: error: <message>`` to stderr and exits
with status 1 (argument errors exit with status 2, as argparse does).

Any option can also be given in a flat ``key = value`` config file passed via
``--config``; keys are the long option names with ``-`` replaced by ``_``.
Command-line flags override file values.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio import load_audio
from .checkpoint import load_checkpoint
from .infer import DEFAULT_NMR_COUNT, NMRBank, predict_mos
from .metrics import embeddings_csv, evaluate_levels, pca2, retrieval_mp
from .model import ModelConfig, QualityNet
from .synth import CLEAN_SYSTEM, CorpusConfig, gen_corpus, level_histogram, level_of, read_manifest
from .train import TrainConfig, train

log = logging.getLogger("nmrmos")

ERROR_PREFIX = "nmrmos: error: "
PARAM_WINDOW = (100_000, 140_000)


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}: line {lineno}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# option name -> (type, default, help); shared between argparse and config files
GLOBAL_OPTIONS = {
    "seed": (int, 0, "master RNG seed"),
    "deterministic": (_bool, False, "single-shard gradient accumulation for bit-identical runs"),
    "log_level": (str, "INFO", "logging level for the stderr log"),
}

COMMAND_OPTIONS: dict[str, dict[str, tuple]] = {
    "gen-corpus": {
        "out_dir": (str, "corpus", "output directory"),
        "n_sources": (int, 40, "number of clean sources"),
        "kinds": (str, "additive_noise,lowpass,clip,reverb", "comma-separated degradation kinds"),
        "levels": (int, 10, "quality levels per kind"),
        "per_cell": (int, 1, "clips per (source, kind, level)"),
        "clip_seconds": (float, 3.0, "clip duration in seconds"),
        "train_fraction": (float, 0.6, "fraction of sources in the train split"),
        "dev_fraction": (float, 0.15, "fraction of sources in the dev split"),
        "n_nmr": (int, 100, "clean non-matching references written to nmr/"),
    },
    "train": {
        "manifest": (str, None, "labeled manifest (train and dev splits)"),
        "clean_manifest": (str, None, "clean-speech manifest (defaults to --manifest)"),
        "checkpoint_dir": (str, "checkpoints", "where best.ckpt, final.ckpt and train_log.jsonl go"),
        "batch_size": (int, 64, "pairs per Adam step"),
        "lr": (float, 1e-4, "Adam learning rate"),
        "epochs": (int, 50, "passes of len(D_lab) pairs"),
        "clean_pair_fraction": (float, 0.25, "probability of drawing a pair member from D_clean"),
        "lambda_q": (float, 1.0, "weight of the relative-rating loss"),
        "shard_size": (int, 16, "pairs per forward/backward shard"),
        "dev_nmr": (int, 5, "clean references used for dev evaluation"),
        "init": (str, "he", "weight init scheme (he or fan_in)"),
    },
    "predict": {
        "checkpoint": (str, None, "model checkpoint"),
        "input": (str, None, "a WAV file or a JSON-lines manifest"),
        "split": (str, "test", "manifest split to score"),
        "nmr_dir": (str, None, "directory of clean reference WAVs"),
        "n": (int, None, "references per estimate (default min(100, available))"),
        "output": (str, None, "write JSON lines here instead of stdout"),
    },
    "evaluate": {
        "predictions": (str, None, "JSON lines from predict"),
        "manifest": (str, None, "manifest holding the target MOS"),
        "output": (str, None, "write the report here instead of stdout"),
    },
    "retrieve": {
        "checkpoint": (str, None, "model checkpoint"),
        "manifest": (str, None, "manifest to embed"),
        "split": (str, "test", "manifest split to use"),
        "k": (int, 10, "neighbours per query"),
        "output": (str, None, "write the result here instead of stdout"),
    },
    "export-embeddings": {
        "checkpoint": (str, None, "model checkpoint"),
        "manifest": (str, None, "manifest to embed"),
        "split": (str, "test", "manifest split to use"),
        "output": (str, None, "CSV destination (default stdout)"),
    },
}

REQUIRED = {
    "train": ("manifest",),
    "predict": ("checkpoint", "input", "nmr_dir"),
    "evaluate": ("predictions", "manifest"),
    "retrieve": ("checkpoint", "manifest"),
    "export-embeddings": ("checkpoint", "manifest"),
}


def _add_options(parser: argparse.ArgumentParser, options: dict[str, tuple]) -> None:
    for key, (cast, default, text) in options.items():
        flag = "--" + key.replace("_", "-")
        if cast is _bool:
            parser.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=text)
        else:
            parser.add_argument(flag, dest=key, type=cast, default=None,
                                help=f"{text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    _add_options(common, GLOBAL_OPTIONS)
    parser = argparse.ArgumentParser(prog="nmrmos", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMAND_OPTIONS.items():
        _add_options(sub.add_parser(name, parents=[common]), options)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags into one flat dict."""
    options = {**GLOBAL_OPTIONS, **COMMAND_OPTIONS[args.command]}
    effective = {key: spec[1] for key, spec in options.items()}
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key not in options:
                raise CliError(f"{args.config}: unknown key {key!r} for {args.command}")
            try:
                effective[key] = options[key][0](value)
            except ValueError:
                raise CliError(f"{args.config}: bad value for {key}: {value!r}") from None
    for key in options:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    for key in REQUIRED.get(args.command, ()):
        if effective.get(key) in (None, ""):
            raise CliError(f"{args.command} needs --{key.replace('_', '-')}")
    return effective


# ---------------------------------------------------------------------------
# output helpers


class _Sink:
    def __init__(self, path: str | None):
        self.path = path
        self.fh = None

    def __enter__(self):
        if self.path:
            try:
                self.fh = open(self.path, "w", encoding="utf-8", newline="")
            except OSError as exc:
                raise CliError(f"cannot write {self.path}: {exc.strerror}") from None
            return self.fh
        return sys.stdout

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()


def _split_records(manifest: str, split: str | None) -> list[dict]:
    records = read_manifest(manifest)
    if split:
        records = [r for r in records if r.get("split") == split]
    if not records:
        raise CliError(f"{manifest}: no records in split {split!r}")
    return records


def _embed_records(model: QualityNet, records: Sequence[dict]) -> np.ndarray:
    from .audio import model_windows
    rows = []
    for rec in records:
        windows = model_windows(load_audio(rec["abspath"]).samples, model.config.excerpt_samples)
        rows.append(model.embed(windows).mean(axis=0))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(cfg: dict) -> int:
    corpus = CorpusConfig.from_mapping({k: cfg[k] for k in COMMAND_OPTIONS["gen-corpus"]} | {"seed": cfg["seed"]})
    records = gen_corpus(corpus)
    by_kind: dict[str, int] = {}
    for rec in records:
        kind = "clean" if rec["system_id"] == CLEAN_SYSTEM else rec["system_id"].rpartition("_L")[0]
        by_kind[kind] = by_kind.get(kind, 0) + 1
    levels = level_histogram(records)
    print(f"wrote {len(records)} clips and {corpus.n_nmr} references to {corpus.out_dir}")
    print("per kind: " + ", ".join(f"{k}={v}" for k, v in sorted(by_kind.items())))
    print("per level: " + ", ".join(f"L{k}={levels[k]}" for k in sorted(levels)))
    return 0


def cmd_train(cfg: dict) -> int:
    model_cfg = ModelConfig(init=cfg["init"], seed=cfg["seed"])
    config = TrainConfig(lab_manifest=cfg["manifest"], clean_manifest=cfg["clean_manifest"],
                         batch_size=cfg["batch_size"], lr=cfg["lr"], epochs=cfg["epochs"],
                         clean_pair_fraction=cfg["clean_pair_fraction"], lambda_q=cfg["lambda_q"],
                         seed=cfg["seed"], checkpoint_dir=cfg["checkpoint_dir"],
                         shard_size=cfg["batch_size"] if cfg["deterministic"] else cfg["shard_size"],
                         dev_nmr=cfg["dev_nmr"], model=model_cfg)
    n_params = QualityNet(model_cfg).n_params
    lo, hi = PARAM_WINDOW
    print(f"parameters: {n_params}")
    if not lo <= n_params <= hi:
        raise CliError(f"parameter count {n_params} outside [{lo}, {hi}]")

    def report(entry, _model):
        print(f"epoch {entry.epoch}: loss {entry.train_loss:.5f} dev_spearman {entry.dev_spearman}", flush=True)

    result = train(config, on_epoch=report)
    print(f"final checkpoint: {result.final_path}")
    print(f"best checkpoint: {result.best_path}")
    return 0


def cmd_predict(cfg: dict) -> int:
    model, _ = load_checkpoint(cfg["checkpoint"])
    nmr_dir = Path(cfg["nmr_dir"])
    if not nmr_dir.is_dir():
        raise CliError(f"NMR directory not found: {nmr_dir}")
    nmr_paths = sorted(nmr_dir.glob("*.wav"))
    if not nmr_paths:
        raise CliError(f"no WAV files in NMR directory {nmr_dir}")
    n = cfg["n"] if cfg["n"] is not None else min(DEFAULT_NMR_COUNT, len(nmr_paths))
    if n < 1:
        raise CliError(f"n must be >= 1, got {n}")
    if n > len(nmr_paths):
        raise CliError(f"n={n} exceeds the {len(nmr_paths)} available NMRs in {nmr_dir}")
    bank = NMRBank(model, [load_audio(p) for p in nmr_paths[:n]])

    source = Path(cfg["input"])
    if source.suffix.lower() == ".wav":
        items = [(source.stem, str(source))]
    else:
        items = [(r["utterance_id"], r["abspath"]) for r in _split_records(str(source), cfg["split"])]
    with _Sink(cfg["output"]) as out:
        for utt, path in items:
            est = predict_mos(model, load_audio(path), bank, n=n, utterance_id=utt)
            out.write(json.dumps(est.to_dict()) + "\n")
    log.info("scored %d utterance(s) against %d NMRs", len(items), n)
    return 0


def read_predictions(path: str) -> dict[str, float]:
    preds: dict[str, float] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read predictions {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            preds[str(obj["utterance_id"])] = float(obj["mos"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise CliError(f"{path}: line {lineno}: expected an object with utterance_id and mos") from None
    return preds


def cmd_evaluate(cfg: dict) -> int:
    preds = read_predictions(cfg["predictions"])
    targets = {r["utterance_id"]: r for r in read_manifest(cfg["manifest"])}
    missing = sorted(set(preds) - set(targets))
    if missing:
        raise CliError(f"utterance_id mismatch: {len(missing)} prediction(s) not in manifest, e.g. {missing[0]!r}")
    ids = sorted(preds)
    reports = evaluate_levels([targets[u]["system_id"] for u in ids], [preds[u] for u in ids],
                              [targets[u]["mos"] for u in ids])
    with _Sink(cfg["output"]) as out:
        for level in ("utterance", "system"):
            out.write(reports[level].to_json() + "\n")
    return 0


def cmd_retrieve(cfg: dict) -> int:
    model, _ = load_checkpoint(cfg["checkpoint"])
    records = [r for r in _split_records(cfg["manifest"], cfg["split"]) if r["system_id"] != CLEAN_SYSTEM]
    if len(records) <= cfg["k"]:
        raise CliError(f"need more than k={cfg['k']} degraded items, found {len(records)}")
    labels = [level_of(r["system_id"]) for r in records]
    mp = retrieval_mp(_embed_records(model, records), labels, cfg["k"])
    with _Sink(cfg["output"]) as out:
        out.write(json.dumps({"k": cfg["k"], "mp": mp, "count": len(records), "chance": 1.0 / len(set(labels))}) + "\n")
    return 0


def cmd_export_embeddings(cfg: dict) -> int:
    model, _ = load_checkpoint(cfg["checkpoint"])
    records = _split_records(cfg["manifest"], cfg["split"])
    emb = _embed_records(model, records)
    coords = pca2(emb, seed=cfg["seed"])
    with _Sink(cfg["output"]) as out:
        out.write(embeddings_csv([r["utterance_id"] for r in records], [r["system_id"] for r in records], emb, coords))
    return 0


COMMANDS: dict[str, Callable[[dict], int]] = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "retrieve": cmd_retrieve,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        logging.basicConfig(level=str(cfg["log_level"]).upper(), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s", force=True)
        log.info("effective config: %s", json.dumps({"command": args.command, **cfg}, sort_keys=True))
        return COMMANDS[args.command](cfg)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(ERROR_PREFIX + str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
