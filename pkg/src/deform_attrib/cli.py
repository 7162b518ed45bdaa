"""Command-line entry point: ``deform-attrib synth|train|eval|viz``.

Every command accepts ``--config FILE`` with flat ``key=value`` lines; flags
given on the command line override the file. Unknown keys are rejected and
the fully resolved configuration is written next to the outputs as
``config.txt``, which can be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import synthdata, viz
from .evaluation import evaluate, score_pairs
from .models import read_manifest
from .synthdata import Corpus, SyntheticSpec
from .train import NumericAbort, TrainConfig, Trainer, load_generator

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("deform_attrib")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# -- flat key=value configs -------------------------------------------------

def read_config(path) -> dict:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={_fmt(v)}\n" for k, v in sorted(values.items())))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _convert(text: str, default, annotation: str = ""):
    text = str(text)
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        parts = [float(v) for v in text.split(",")]
        return (parts[0], parts[-1])
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None and "float" in annotation:
        return float(text)
    if default is None:
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
    return text


def resolve(cls, file_values: dict, flag_values: dict, extra_keys=()) -> tuple[object, dict]:
    """Merge defaults < config file < flags into an instance of ``cls``."""
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                for f in dataclasses.fields(cls)}
    annotations = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    allowed = set(defaults) | set(extra_keys)
    unknown = sorted(set(file_values) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {k: v for k, v in file_values.items() if k in defaults}
    merged.update({k: v for k, v in flag_values.items() if v is not None and k in defaults})
    try:
        kwargs = {k: _convert(v, defaults[k], annotations[k]) if isinstance(v, str) else v for k, v in merged.items()}
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return obj, dataclasses.asdict(obj)


def _add_fields(parser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, type=str)


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    spec, resolved = resolve(SyntheticSpec, file_values, vars(args))
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"{out} is not empty (use --force)")
        shutil.rmtree(out)
    rows = synthdata.generate_corpus(spec, out)
    write_config(out / "config.txt", resolved)
    counts = {}
    for r in rows:
        key = (r["split"], r["class"])
        counts[key] = counts.get(key, 0) + 1
    for (split, cls), n in sorted(counts.items(), key=lambda kv: (synthdata.SPLITS.index(kv[0][0]), kv[0][1])):
        print(f"{split} class {cls}: {n}")
    return EXIT_OK


def _load_corpus(path) -> Corpus:
    try:
        return Corpus.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"invalid dataset at {path}: {exc}") from exc


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    cfg, resolved = resolve(TrainConfig, file_values, vars(args), extra_keys=("seeds",))
    n_seeds = int(args.seeds or file_values.get("seeds", 1))
    corpus = _load_corpus(args.data)
    if not corpus.val:
        raise DataError("validation split has no pairs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", {**resolved, "seeds": n_seeds})

    summary = []
    for k in range(n_seeds):
        seed_cfg = dataclasses.replace(cfg, seed=cfg.seed + k)
        run_dir = out / f"seed_{seed_cfg.seed}" if n_seeds > 1 else out
        run_dir.mkdir(parents=True, exist_ok=True)
        write_config(run_dir / "config.txt", dataclasses.asdict(seed_cfg))
        trainer = Trainer(seed_cfg, corpus.train0, corpus.train1, corpus.val, run_dir=run_dir)
        state = trainer.fit()
        best = run_dir / "best"
        gen = load_generator(best) if best.exists() else trainer.generator
        test = evaluate(gen, corpus.test) if corpus.test else None
        summary.append({
            "seed": seed_cfg.seed,
            "best_epoch": state.best_epoch,
            "val_ncc": state.best_val_ncc,
            "test_ncc": test.mean if test else float("nan"),
        })
        print(f"seed {seed_cfg.seed}: best epoch {state.best_epoch}, "
              f"val NCC {state.best_val_ncc:.4f}, test NCC {summary[-1]['test_ncc']:.4f}")
    write_seed_summary(out / "summary.csv", summary)
    tests = np.array([s["test_ncc"] for s in summary])
    print(f"test NCC over {n_seeds} seed(s): {format_mean_std(tests)}")
    return EXIT_OK


def format_mean_std(values) -> str:
    values = np.asarray(values, dtype=np.float64)
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return f"{values.mean():.3f}±{std:.3f}"


def write_seed_summary(path, summary) -> None:
    lines = ["seed,best_epoch,val_ncc,test_ncc"]
    for s in summary:
        lines.append(f"{s['seed']},{s['best_epoch']},{s['val_ncc']!r},{s['test_ncc']!r}")
    lines.append(f"mean±std,,,{format_mean_std([s['test_ncc'] for s in summary])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    corpus = _load_corpus(args.data)
    pairs = corpus.test if args.split == "test" else corpus.val
    if not pairs:
        raise DataError(f"no {args.split} pairs in {args.data}")
    manifest = _checkpoint_manifest(args.checkpoint)
    if manifest.get("mode") == "oracle":
        report = score_pairs(pairs, [p.dx_true for p in pairs])
    else:
        report = evaluate(load_generator(args.checkpoint), pairs)
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    print(f"{args.split} NCC: mean {report.mean:.4f}, std {report.std:.4f}, "
          f"{len(report.subject_means)} subjects, {report.n_degenerate} degenerate pairs")
    return EXIT_OK


def _checkpoint_manifest(path) -> dict:
    try:
        return read_manifest(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_viz(args) -> int:
    from .models import modify

    corpus = _load_corpus(args.data)
    match = [r for r in corpus.rows if args.image_id in (r["subject_id"], r["pair_id"])
             and r["class"] == 1]
    if not match:
        raise DataError(f"no class-1 image with id {args.image_id!r}")
    row = match[0]
    x1 = synthdata.diffcore.load_tensor(corpus.root / row["image_path"])
    gen = load_generator(args.checkpoint)
    with torch.no_grad():
        x_hat0, out = modify(gen, torch.from_numpy(x1)[None, None])
    x_hat0 = x_hat0[0, 0].numpy()
    diff = x_hat0 - x1
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    stem = args.image_id
    if gen.cfg.output_mode == "field":
        field = out[0].numpy()
        style = viz.QuiverStyle(scale=float(args.arrow_scale), stride=args.stride)
        slice_index = x1.shape[0] // 2 if x1.ndim == 3 else None
        (dest / f"{stem}_quiver.svg").write_text(viz.render_quiver(x1, field, style, slice_index))
        synthdata.diffcore.save_tensor(dest / f"{stem}_field.dft", field)
    viz.save_gray_png(dest / f"{stem}_modified.png", x_hat0 if x_hat0.ndim == 2 else x_hat0[x_hat0.shape[0] // 2])
    synthdata.diffcore.save_tensor(dest / f"{stem}_modified.dft", x_hat0)
    viz.render_difference(diff, dest / f"{stem}_difference.png")
    mid = (lambda a: a[a.shape[0] // 2]) if x1.ndim == 3 else (lambda a: a)
    viz.side_by_side(mid(x1), mid(x_hat0), mid(diff), dest / f"{stem}_panel.png")
    print(f"wrote figures for {stem} to {dest}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deform-attrib", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--config")
    _add_fields(s, SyntheticSpec)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a generator/critic pair")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seeds", type=int, default=None)
    _add_fields(t, TrainConfig)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint with masked NCC")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="render quiver and difference figures")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--image-id", required=True)
    v.add_argument("--arrow-scale", type=float, default=1.0)
    v.add_argument("--stride", type=int, default=None)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
