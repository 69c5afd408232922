"""``poservq`` command line: synth, train, tokenize, reconstruct, analyze, eval.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
Data goes to files; a one-line JSON summary goes to stdout and progress
messages to stderr. ``POSERVQ_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, CheckpointVersionError, load_checkpoint, save_checkpoint
from .checkpoint import FORMAT_VERSION as CHECKPOINT_VERSION
from .dataset import DatasetError, read_dataset, write_dataset
from .evaluation import (
    direction_similarity, disentanglement_summary, export_embeddings, reconstruction_report, write_similarity_csv,
)
from .losses import loss_recons, loss_vel
from .model import TrainConfig
from .parser import PoseCodeSchema, default_schema
from .rvq import latents_from_tokens, read_tokens, token_record, write_tokens
from .skeleton import MotionSequence, default_skeleton
from .synth import MOTION_CLASSES, generate_dataset
from .training import TrainingData, TrainState, split_dataset, train

log = logging.getLogger("poservq")

OUT_ENV = "POSERVQ_OUT"
RUN_KEYS = {"schema", "data", "out"}


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


class RunError(Exception):
    """Runtime or I/O failure; exit code 1."""


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "poservq-out"))


def emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


# configuration ------------------------------------------------------------


def _coerce(name: str, value, default):
    """Check a JSON value against the type of the TrainConfig default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config.{name}: expected {type(default).__name__}, got {value!r}")
    return value


def load_run_config(path: str | None) -> tuple[TrainConfig, dict]:
    """JSON with TrainConfig fields plus ``schema``, ``data``, ``out``; unknown keys are refused."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    defaults = TrainConfig()
    known = set(TrainConfig.field_names()) | RUN_KEYS
    for key in sorted(raw):
        if key not in known:
            raise UsageError(f"config.{key}: unknown key")
    values = {k: _coerce(k, raw[k], getattr(defaults, k)) for k in TrainConfig.field_names() if k in raw}
    try:
        config = TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None
    run = {k: raw[k] for k in RUN_KEYS & set(raw)}
    for k in ("schema", "data", "out"):
        if k in run and not isinstance(run[k], str):
            raise UsageError(f"config.{k}: expected a path string")
    return config, run


def load_schema(path) -> PoseCodeSchema:
    if path is None:
        return default_schema()
    try:
        return PoseCodeSchema.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read schema {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"schema {path}: {exc}") from None


def require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


def load_sequences(path, skeleton=None) -> tuple:
    require_file(path, "dataset")
    skel, seqs = read_dataset(path, skeleton)
    if not seqs:
        raise UsageError(f"dataset {path} holds no sequences")
    return skel, seqs


def load_model(path):
    require_file(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except CheckpointVersionError as exc:
        raise RunError(f"{exc} (found version {exc.found}, supported {exc.expected})") from None


def _trim(seq: MotionSequence, stride: int) -> np.ndarray:
    usable = seq.length - seq.length % stride
    if usable < stride:
        raise RunError(f"sequence {seq.id!r} has fewer than {stride} frames")
    return seq.frames[:usable]


# commands -----------------------------------------------------------------


def cmd_synth(args) -> dict:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()] if args.classes else list(MOTION_CLASSES)
    for c in classes:
        if c not in MOTION_CLASSES:
            raise UsageError(f"--classes: unknown motion class {c!r} (known: {', '.join(MOTION_CLASSES)})")
    if args.per_class < 1 or args.length < 8:
        raise UsageError("--per-class must be >= 1 and --length >= 8")
    seqs = generate_dataset(classes, args.per_class, args.length, args.seed)
    out = Path(args.out) if args.out else default_out() / "synth.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, seqs, default_skeleton())
    counts = {c: sum(s.label == c for s in seqs) for c in classes}
    return {"command": "synth", "out": str(out), "sequences": len(seqs), "per_class": counts}


def _read_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    return [ln for ln in lines if ln.strip() and json.loads(ln)["iter"] <= upto]


def cmd_train(args) -> dict:
    config, run = load_run_config(args.config)
    if args.seed is not None:
        config = TrainConfig(**{**asdict(config), "seed": args.seed})
    if args.iterations is not None:
        try:
            config = TrainConfig(**{**asdict(config), "iterations": args.iterations,
                                    "warmup": min(config.warmup, args.iterations)})
        except ValueError as exc:
            raise UsageError(f"--iterations: {exc}") from None
    data_path = args.data or run.get("data")
    if data_path is None:
        raise UsageError("no dataset: pass --data or set 'data' in the config")
    out = Path(args.out or run.get("out") or default_out())
    schema = load_schema(run.get("schema"))
    skeleton, seqs = load_sequences(data_path)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    if args.resume:
        last = out / "last.ckpt"
        state = load_model(require_file(last, "checkpoint"))
        saved, wanted = asdict(state.config), asdict(config)
        changed = sorted(k for k in saved if k != "iterations" and saved[k] != wanted[k])
        if changed:
            raise UsageError(f"--resume: config.{changed[0]} differs from the checkpoint's")
        state.model.config = config
        kept = _read_log(log_path, state.iteration)
        log.info("resuming at iteration %d", state.iteration)
    else:
        state = TrainState.fresh(config, schema, skeleton)
        kept = []
    if state.model.skeleton != skeleton:
        raise RunError("dataset skeleton differs from the model's")

    train_seqs, val_seqs = split_dataset(seqs, config.val_fraction, config.seed)
    try:
        data = TrainingData(train_seqs, state.model.schema, skeleton, config.crop_length, config.stride)
        val = TrainingData(val_seqs, state.model.schema, skeleton, config.crop_length, config.stride)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    with open(log_path, "w", encoding="utf-8") as fh:
        fh.writelines(kept)

        def on_record(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            if record["iter"] % 100 == 0:
                fh.flush()
                log.info("iter %d final %.5f", record["iter"], record["final"])

        def on_checkpoint(st, kind):
            fh.flush()
            name = {"best": "best.ckpt", "last": "last.ckpt"}.get(kind, f"step_{st.iteration:06d}.ckpt")
            save_checkpoint(st, out / name)
            if kind == "periodic":
                save_checkpoint(st, out / "last.ckpt")

        state, _ = train(state, data, val, on_record, on_checkpoint)
    return {"command": "train", "out": str(out), "iterations": state.iteration, "best_val_recons": state.best_val,
            "best_iteration": state.best_iteration}


def _model_sequences(args):
    state = load_model(args.checkpoint)
    model = state.model
    try:
        _, seqs = load_sequences(args.data, model.skeleton)
    except DatasetError as exc:
        raise RunError(f"{exc} (checkpoint format version {CHECKPOINT_VERSION})") from None
    return model, sorted(seqs, key=lambda s: s.id)


def cmd_tokenize(args) -> dict:
    model, seqs = _model_sequences(args)
    stride = model.config.stride
    records = []
    for seq in seqs:
        frames = _trim(seq, stride)
        khot = model.parse(frames)
        _, quant = model.latents(frames[None], khot[None])
        stages = quant.indices[0] if quant is not None else np.zeros((len(khot), 0), dtype=np.int64)
        records.append(token_record(seq.id, seq.label, khot, stages, stride))
    out = Path(args.out or default_out() / "tokens.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {"stride": stride, "stages": model.config.stages, "pose_codes": model.schema.code_names(),
              "residual_codebook_size": model.residual_codebook.size}
    write_tokens(out, header, records)
    return {"command": "tokenize", "out": str(out), "sequences": len(records)}


def cmd_reconstruct(args) -> dict:
    model, seqs = _model_sequences(args)
    stride = model.config.stride
    tokens = None
    if args.tokens:
        header, recs = read_tokens(require_file(args.tokens, "token file"))
        if header.get("stride") != stride or header.get("pose_codes") != model.schema.code_names():
            raise RunError("token file was written for a different model")
        tokens = {r["id"]: r for r in recs}
    out_seqs, extra = [], {}
    for seq in seqs:
        frames = _trim(seq, stride)
        if tokens is None:
            m_hat = model.reconstruct(frames[None])[0]
        else:
            if seq.id not in tokens:
                raise RunError(f"sequence {seq.id!r} is missing from the token file")
            latent = latents_from_tokens(tokens[seq.id], model.pose_codebook.entries, model.residual_codebook.entries)
            m_hat = model.decode_latents(latent[None])[0]
        out_seqs.append(seq.replace_frames(m_hat))
        extra[seq.id] = {"recons_loss": loss_recons(frames, m_hat, model.config.loss),
                         "vel_loss": loss_vel(frames, m_hat, model.config.loss)}
    out = Path(args.out or default_out() / "reconstruction.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, out_seqs, model.skeleton, seqs[0].fps, extra)
    mean = float(np.mean([e["recons_loss"] for e in extra.values()]))
    return {"command": "reconstruct", "out": str(out), "sequences": len(out_seqs), "mean_recons_loss": mean}


def cmd_analyze(args) -> dict:
    model = load_model(args.checkpoint).model
    out = Path(args.out or default_out() / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    sim, labels = direction_similarity(model.pose_codebook, model.schema)
    names = model.schema.code_names()
    write_similarity_csv(out / "similarity.csv", sim, names)
    export_embeddings(out / "embeddings.csv", model.pose_codebook, model.schema)
    summary = disentanglement_summary(sim, labels)
    (out / "disentanglement.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return {"command": "analyze", "out": str(out), "codes": len(names), **summary}


def cmd_eval(args) -> dict:
    model, seqs = _model_sequences(args)
    if args.hop is not None and args.hop < 1:
        raise UsageError("--hop must be >= 1")
    try:
        report = reconstruction_report(seqs, None if args.identity else model, model.config.crop_length, args.hop)
    except ValueError as exc:
        raise RunError(str(exc)) from None
    out = Path(args.out or default_out() / "report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return {"command": "eval", "out": str(out), "proxy_fid": report["proxy_fid"], "recons_loss": report["recons_loss"]}


# entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poservq", description="Pose-code motion tokenizer with residual quantization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic motion dataset")
    s.add_argument("--classes", help="comma-separated class names (default: all)")
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--length", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="dataset file")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a tokenizer")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--data")
    t.add_argument("--out", help="run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("tokenize", cmd_tokenize, "dump pose and residual tokens"),
                              ("reconstruct", cmd_reconstruct, "decode sequences back to motion"),
                              ("eval", cmd_eval, "write a reconstruction report")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--out")
        c.set_defaults(func=func)
        if name == "reconstruct":
            c.add_argument("--tokens", help="decode from a token file instead of re-encoding")
        if name == "eval":
            c.add_argument("--hop", type=int, default=16, help="window hop in frames")
            c.add_argument("--identity", action="store_true", help="bypass the model (reconstruction = input)")

    a = sub.add_parser("analyze", help="code-direction similarity and embedding export")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", help="output directory")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        emit(args.func(args))
        return 0
    except UsageError as exc:
        print(f"poservq: error: {exc}", file=sys.stderr)
        return 2
    except (RunError, CheckpointError, DatasetError, OSError, ValueError) as exc:
        print(f"poservq: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
