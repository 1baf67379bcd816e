"""Command-line entry point: ``python -m longidiff <command> ...``.

Every command loads and validates the JSON config (plus overrides) before
it touches the filesystem. ``--set key=value`` overrides any top-level
config key (dotted keys reach nested sections, e.g. ``data.n_train=8``);
values are parsed as JSON when possible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, load_config
from .denoiser import GLAUCOMA, NORMAL
from .evaluation import eye_seed, evaluate_run
from .experiments import ablate_label, augment
from .fundus import gen_dataset, load_dataset, split_counts, write_image
from .masking import hide_target_slot
from .metrics import ClassifierConfig, Tensor, init_classifier, train_classifier
from .sampling import GenerationRequest, generate_latents, label_vector
from .training import load_params, train, window_for, window_labels, window_latents

LABELS = {"normal": NORMAL, "glaucoma": GLAUCOMA}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args, require_seed: bool = False) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        *parents, leaf = key.split(".")
        node = overrides
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = _parse_value(value)
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("data_dir", "data_dir"), ("run_dir", "run_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if require_seed and getattr(args, "seed", None) is None:
        raise ConfigError("--seed is required for this command")
    return load_config(args.config, overrides)


def _classifier_hash(ccfg: ClassifierConfig) -> str:
    return hashlib.sha256(json.dumps(ccfg.__dict__, sort_keys=True).encode()).hexdigest()


def save_classifier(path: Path, ccfg: ClassifierConfig, params) -> None:
    tensors = {k: v.data for k, v in params.items()}
    ckpt_io.save(path, ckpt_io.Checkpoint(_classifier_hash(ccfg), ccfg.steps, tensors))


def load_classifier(path: Path, ccfg: ClassifierConfig):
    ck = ckpt_io.load(path, expect_hash=_classifier_hash(ccfg))
    params = init_classifier(ccfg)
    for k in params:
        params[k] = Tensor(ck.tensors[k], requires_grad=True)
    return params


def _stack(dataset, split):
    seqs = dataset.split(split)
    return np.concatenate([s.frames for s in seqs]), np.concatenate([s.labels for s in seqs])


def cmd_make_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    seed = cfg.seed if args.data_seed is None else args.data_seed
    manifest = gen_dataset(cfg.data, out, seed)
    frames = sum(len(s["frames"]) for s in manifest["sequences"])
    glaucoma = sum(f["label"] for s in manifest["sequences"] for f in s["frames"])
    for split, (n, tv) in split_counts(cfg.data).items():
        print(f"{split}: {n} eyes ({tv} time-variant)")
    print(f"{frames} frames, {glaucoma} glaucoma, written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, require_seed=True)
    path = train(cfg, resume=not args.no_resume, log=print)
    print(f"checkpoint: {path}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg.data_dir)
    x, y = _stack(data, "train")
    params, acc = train_classifier(x, y, cfg.classifier, val=_stack(data, "test"))
    out = Path(args.out or Path(cfg.run_dir) / "classifier.bin")
    save_classifier(out, cfg.classifier, params)
    print(f"held-out accuracy {acc:.4f}; classifier: {out}")
    return 0


def _checkpoint_for(cfg: RunConfig, given) -> Path:
    path = Path(given) if given else Path(cfg.run_dir) / "checkpoint.bin"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return path


def cmd_generate(args) -> int:
    cfg = _config(args, require_seed=True)
    data = load_dataset(cfg.data_dir)
    matches = [s for s in data.sequences if s.eye_id == args.eye]
    if not matches:
        raise ConfigError(f"eye {args.eye!r} not in {cfg.data_dir}")
    seq = matches[0]
    win = window_for(seq, args.year, cfg.frames, cfg.years_per_slot)
    slot = win.mask.slot_of(args.year)
    mask = hide_target_slot(win.mask, slot)
    label = LABELS[args.label] if args.label else None
    labels = label_vector(mask.codes, window_labels(seq, win, mask.codes, True), label, cfg.label_conditioning)
    params = load_params(cfg, _checkpoint_for(cfg, args.checkpoint))
    req = GenerationRequest(window_latents(cfg.to_latent(seq.frames), win), mask.codes, labels, (cfg.seed, eye_seed(seq.eye_id)))
    frame = np.clip(cfg.from_latent(generate_latents(params, cfg, [req])[0]), 0.0, 1.0)
    out = Path(args.out)
    fmt = "pgm" if out.suffix == ".pgm" else "png"
    write_image(out, frame, fmt)
    provenance = {
        "eye_id": seq.eye_id,
        "target_year": args.year,
        "slot": slot,
        "mask": mask.codes.tolist(),
        "label": args.label,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "chain_length": cfg.T,
        "replacement": cfg.replacement,
    }
    out.with_suffix(".json").write_text(json.dumps(provenance, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg.data_dir)
    params = load_params(cfg, _checkpoint_for(cfg, args.checkpoint))
    classifier = load_classifier(Path(args.classifier), cfg.classifier) if args.classifier else None
    report = evaluate_run(cfg, data, params, classifier)
    out = Path(args.out or cfg.run_dir)
    report.write(out)
    print(json.dumps(report.summary, indent=1, sort_keys=True))
    return 0


def _run_model(run_dir: Path, cfg_override: RunConfig | None = None):
    cfg = cfg_override or load_config(run_dir / "config.json")
    return cfg, load_params(cfg, run_dir / "checkpoint.bin")


def cmd_ablate_label(args) -> int:
    runs = [Path(r) for r in args.runs]
    models = [_run_model(r) for r in runs]
    data_dir = args.data_dir or models[0][0].data_dir
    data = load_dataset(data_dir)
    classifier = load_classifier(Path(args.classifier), models[0][0].classifier)
    table = ablate_label(models, data, classifier)
    table.write(args.out)
    print(table.to_csv(), end="")
    print(json.dumps(table.counterfactual, sort_keys=True))
    return 0


def cmd_augment(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg.data_dir)
    params = load_params(cfg, _checkpoint_for(cfg, args.checkpoint))
    result = augment(cfg, params, data, count=args.count)
    out = Path(args.out or cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "augment.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"accuracy without {result.baseline_accuracy:.4f}, with {result.augmented_accuracy:.4f} ({result.delta:+.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="longidiff", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data-dir")
        p.add_argument("--run-dir")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("make-data", help="render the synthetic dataset"))
    p.add_argument("--out")
    p.add_argument("--data-seed", type=int, help="dataset seed (defaults to the run seed)")
    p.set_defaults(fn=cmd_make_data)

    p = common(sub.add_parser("train", help="train the denoiser"))
    p.add_argument("--steps", type=int)
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("train-classifier", help="train the glaucoma classifier"))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train_classifier)

    p = common(sub.add_parser("generate", help="generate one frame"))
    p.add_argument("--checkpoint")
    p.add_argument("--eye", required=True)
    p.add_argument("--year", type=int, required=True)
    p.add_argument("--label", choices=sorted(LABELS))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = common(sub.add_parser("evaluate", help="score held-out extrapolation"))
    p.add_argument("--checkpoint")
    p.add_argument("--classifier")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate-label", help="with/without label conditioning table")
    p.add_argument("--runs", nargs=2, required=True, metavar="RUN_DIR", help="two run directories")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate_label)

    p = common(sub.add_parser("augment", help="classifier accuracy with generated augmentation"))
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_augment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ckpt_io.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
