"""Label-conditioning ablation and generative augmentation of the glaucoma classifier."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, same_except_label
from .denoiser import NORMAL, GLAUCOMA
from .evaluation import eye_seed, last_visit_request
from .fundus import TIME_INVARIANT, TIME_VARIANT, Dataset, SequenceRecord
from .masking import hide_target_slot
from .metrics import ClassifierConfig, UngradableError, accuracy, predict_labels, train_classifier, vcdr
from .sampling import GenerationRequest, generate_frames, label_vector
from .training import window_for, window_labels, window_latents

CLASS_NAMES = {NORMAL: "normal", GLAUCOMA: "glaucoma"}


def _measure(frames) -> tuple[float, int]:
    vals = []
    for f in frames:
        try:
            vals.append(vcdr(f).vcdr)
        except UngradableError:
            pass
    return (float(np.mean(vals)) if vals else float("nan")), len(frames) - len(vals)


def class_groups(dataset: Dataset, n_normal: int, split: str = "test") -> dict[int, list[SequenceRecord]]:
    """Source sequences per intended class: converting eyes for glaucoma, stable eyes for normal."""
    seqs = [s for s in dataset.split(split) if len(s.years) >= 2]
    glaucoma = [s for s in seqs if s.progression == TIME_VARIANT and s.labels[-1] == GLAUCOMA]
    normal = [s for s in seqs if s.progression == TIME_INVARIANT and s.labels[-1] == NORMAL][:n_normal]
    if not glaucoma or not normal:
        raise ValueError(f"ablation needs both classes in split {split!r}")
    return {NORMAL: normal, GLAUCOMA: glaucoma}


def _requests(cfg: RunConfig, seqs, hidden_label: int, n_seeds: int, salt: int = 0) -> list[GenerationRequest]:
    out = []
    for s in seqs:
        lat = cfg.to_latent(s.frames)
        for k in range(n_seeds):
            req, _, _ = last_visit_request(s, cfg, lat, hidden_label=hidden_label)
            req.seed = (cfg.eval.seed, salt, k, eye_seed(s.eye_id))
            out.append(req)
    return out


@dataclass
class AblationRow:
    name: str
    label_conditioning: bool
    ams: dict[str, float]
    vcdr: dict[str, float]
    ungradable: dict[str, int]
    samples: dict[str, int]


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)
    counterfactual: dict = field(default_factory=dict)
    seeds: int = 0

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "rows": [r.__dict__ for r in self.rows],
            "counterfactual": self.counterfactual,
        }

    def to_csv(self) -> str:
        lines = ["model,normal_ams,normal_vcdr,glaucoma_ams,glaucoma_vcdr"]
        for r in self.rows:
            lines.append(
                f"{r.name},{r.ams['normal']:.6f},{r.vcdr['normal']:.6f},{r.ams['glaucoma']:.6f},{r.vcdr['glaucoma']:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(self.to_csv())
        (out / "ablation.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def ablate_label(
    models: list[tuple[RunConfig, dict]],
    dataset: Dataset,
    classifier,
    n_seeds: int | None = None,
    n_normal: int | None = None,
) -> AblationTable:
    """AMS and mean VCDR per intended class for a with/without label-conditioning pair.

    The counterfactual block regenerates the converting eyes with the hidden
    frame conditioned on each class, using the first label-conditioned model.
    """
    if len(models) != 2:
        raise ValueError("ablate_label takes exactly two models")
    (cfg_a, _), (cfg_b, _) = models
    if not same_except_label(cfg_a, cfg_b):
        raise ConfigError("ablation pair differs in more than the label-conditioning flag")
    n_seeds = n_seeds or cfg_a.eval.ablation_seeds
    n_normal = n_normal or cfg_a.eval.ablation_sequences
    groups = class_groups(dataset, n_normal)
    table = AblationTable(seeds=n_seeds)
    for cfg, params in models:
        ams, vc, bad, count = {}, {}, {}, {}
        for cls, seqs in groups.items():
            reqs = _requests(cfg, seqs, cls, n_seeds)
            frames = generate_frames(params, cfg, reqs, batch=cfg.eval.batch)
            name = CLASS_NAMES[cls]
            ams[name] = float(np.mean(predict_labels(classifier, frames) == cls))
            vc[name], bad[name] = _measure(frames)
            count[name] = len(frames)
        label = "with label" if cfg.label_conditioning else "without label"
        table.rows.append(AblationRow(label, cfg.label_conditioning, ams, vc, bad, count))

    conditioned = [(c, p) for c, p in models if c.label_conditioning]
    if conditioned:
        cfg, params = conditioned[0]
        result = {}
        for cls in (NORMAL, GLAUCOMA):
            reqs = _requests(cfg, groups[GLAUCOMA], cls, n_seeds, salt=1)
            frames = generate_frames(params, cfg, reqs, batch=cfg.eval.batch)
            mean, bad = _measure(frames)
            result[CLASS_NAMES[cls]] = {"vcdr": mean, "ungradable": bad, "samples": len(frames)}
        table.counterfactual = result
    return table


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentResult:
    baseline_accuracy: float
    augmented_accuracy: float
    generated: int
    generated_labels: list[int]
    train_counts: dict[str, int]
    test_counts: dict[str, int]
    generated_vcdr: float = float("nan")

    @property
    def delta(self) -> float:
        return self.augmented_accuracy - self.baseline_accuracy

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["delta"] = self.delta
        return d


def imbalanced_split(dataset: Dataset, glaucoma_eyes: int, seed: int):
    """Classifier train frames keeping glaucoma frames of only ``glaucoma_eyes`` eyes,
    and a class-balanced test set drawn from the validation and test splits."""
    train = dataset.split("train")
    converting = [s for s in train if s.labels.max() == GLAUCOMA]
    keep = {s.eye_id for s in converting[:glaucoma_eyes]}
    xs, ys = [], []
    for s in train:
        sel = (s.labels == NORMAL) | np.isin(s.eye_id, list(keep))
        xs.append(s.frames[sel])
        ys.append(s.labels[sel])
    x_train, y_train = np.concatenate(xs), np.concatenate(ys)

    held = dataset.split("val") + dataset.split("test")
    hx = np.concatenate([s.frames for s in held])
    hy = np.concatenate([s.labels for s in held])
    pos = np.flatnonzero(hy == GLAUCOMA)
    neg = np.random.default_rng([seed, 5]).choice(np.flatnonzero(hy == NORMAL), size=pos.size, replace=False)
    idx = np.sort(np.concatenate([pos, neg]))
    return (x_train, y_train), (hx[idx], hy[idx]), [s for s in converting if s.eye_id not in keep]


def augmentation_sources(dataset: Dataset, held_out_converting: list[SequenceRecord]) -> list[SequenceRecord]:
    """Sequences whose observed visits are all normal.

    Converting eyes withheld from the classifier contribute their
    pre-conversion visits; stable eyes contribute every visit.
    """
    out = []
    for s in held_out_converting:
        n = int(np.argmax(s.labels == GLAUCOMA))
        if n >= 2:
            out.append(
                SequenceRecord(s.eye_id, s.split, s.progression, s.years[:n], s.frames[:n], s.labels[:n], s.vcdr[:n], s.phenotype)
            )
    out += [s for s in dataset.split("train") if s.labels.max() == NORMAL]
    return out


def future_request(seq: SequenceRecord, cfg: RunConfig, horizon: int, label: int, seed) -> GenerationRequest:
    """Hide the slot ``horizon`` years after the last visit and ask for ``label``."""
    target = int(seq.years[-1]) + horizon * cfg.years_per_slot
    win = window_for(seq, target, cfg.frames, cfg.years_per_slot)
    mask = hide_target_slot(win.mask, win.mask.slot_of(target))
    base = window_labels(seq, win, mask.codes, True)
    labels = label_vector(mask.codes, base, label, cfg.label_conditioning)
    return GenerationRequest(window_latents(cfg.to_latent(seq.frames), win), mask.codes, labels, tuple(seed))


def augment(
    cfg: RunConfig,
    params,
    dataset: Dataset,
    count: int | None = None,
    classifier_cfg: ClassifierConfig | None = None,
) -> AugmentResult:
    """Retrain the classifier with and without generated glaucoma frames."""
    count = cfg.eval.augment_count if count is None else count
    ccfg = classifier_cfg or cfg.classifier
    (x_train, y_train), (x_test, y_test), withheld = imbalanced_split(dataset, cfg.eval.augment_glaucoma_eyes, cfg.seed)
    base_params, _ = train_classifier(x_train, y_train, ccfg, check_floor=False)
    base_acc = accuracy(base_params, x_test, y_test)

    gen = np.zeros((0,) + x_train.shape[1:], dtype=np.float32)
    if count > 0:
        sources = augmentation_sources(dataset, withheld)
        horizon = cfg.eval.augment_horizon
        reqs = []
        for k in range(count):
            s = sources[k % len(sources)]
            h = 1 + (k // len(sources)) % horizon
            reqs.append(future_request(s, cfg, h, GLAUCOMA, (cfg.eval.seed, 3, k, eye_seed(s.eye_id))))
        gen = generate_frames(params, cfg, reqs, batch=cfg.eval.batch)
    gen_labels = np.full(len(gen), GLAUCOMA, dtype=np.int64)
    aug_params, _ = train_classifier(
        np.concatenate([x_train, gen]), np.concatenate([y_train, gen_labels]), ccfg, check_floor=False
    )
    aug_acc = accuracy(aug_params, x_test, y_test)
    counts = lambda y: {"normal": int(np.sum(y == NORMAL)), "glaucoma": int(np.sum(y == GLAUCOMA))}
    return AugmentResult(
        baseline_accuracy=base_acc,
        augmented_accuracy=aug_acc,
        generated=len(gen),
        generated_labels=gen_labels.tolist(),
        train_counts=counts(y_train),
        test_counts=counts(y_test),
        generated_vcdr=_measure(gen)[0] if len(gen) else float("nan"),
    )
