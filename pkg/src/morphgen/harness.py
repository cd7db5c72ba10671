"""End-to-end experiment orchestration.

Wires dataset generation, training under the morphology-guided or plain
ERM objective, multi-seed cross-domain evaluation, and report merging.
Every stochastic choice is derived from explicit seeds, so a rerun of the
same config file reproduces all emitted artifacts byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, model, optim
from .losses import BatchEmbeddings, ContrastiveConfig, LabelBatch, LossBreakdown
from .model import ArchConfig
from .seeding import derive_seed, rng_from
from .synthdata import (
    DOMAIN_TABLE,
    AugmentConfig,
    augment,
    make_dataset,
    read_manifest,
    read_split,
    write_dataset,
)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    n_train_per_class: int = 200
    n_eval_per_class: int = 100
    resolution: int = 64
    base_seed: int = 2024
    count_min: int = 6
    count_max: int = 14

    def to_dict(self) -> dict:
        return {
            "n_train_per_class": self.n_train_per_class,
            "n_eval_per_class": self.n_eval_per_class,
            "resolution": self.resolution,
            "base_seed": self.base_seed,
            "count_min": self.count_min,
            "count_max": self.count_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 1e-3

    def to_dict(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2,
                "eps_adam": self.eps_adam, "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class ExperimentConfig:
    objective: str = "morphgen"            # "morphgen" or "erm"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    peak_lr: float = 1.5e-4
    warmup_epochs: int = 8
    total_epochs: int = 60
    batch_size: int = 128
    use_swa: bool = True
    swa_start_epoch: int = 30
    seeds: tuple = (1, 2, 3)
    train_domain: int = 0
    eval_domains: tuple = (1, 2, 3, 4)
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.objective not in ("morphgen", "erm"):
            raise ValueError(f"objective must be morphgen or erm, got {self.objective}")
        if self.train_domain in self.eval_domains:
            raise ValueError(
                f"train_domain {self.train_domain} must not appear in "
                f"eval_domains {self.eval_domains} for the OOD protocol"
            )
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "dataset": self.dataset.to_dict(),
            "arch": self.arch.to_dict(),
            "contrastive": {"lam": self.contrastive.lam, "eta": self.contrastive.eta},
            "optimizer": self.optimizer.to_dict(),
            "augment": self.augment.to_dict(),
            "peak_lr": self.peak_lr,
            "warmup_epochs": self.warmup_epochs,
            "total_epochs": self.total_epochs,
            "batch_size": self.batch_size,
            "use_swa": self.use_swa,
            "swa_start_epoch": self.swa_start_epoch,
            "seeds": list(self.seeds),
            "train_domain": self.train_domain,
            "eval_domains": list(self.eval_domains),
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            objective=d["objective"],
            dataset=DatasetConfig.from_dict(d["dataset"]),
            arch=ArchConfig.from_dict(d["arch"]),
            contrastive=ContrastiveConfig(lam=float(d["contrastive"]["lam"]),
                                          eta=float(d["contrastive"]["eta"])),
            optimizer=OptimizerConfig.from_dict(d["optimizer"]),
            augment=AugmentConfig.from_dict(d["augment"]),
            peak_lr=float(d["peak_lr"]),
            warmup_epochs=int(d["warmup_epochs"]),
            total_epochs=int(d["total_epochs"]),
            batch_size=int(d["batch_size"]),
            use_swa=bool(d["use_swa"]),
            swa_start_epoch=int(d["swa_start_epoch"]),
            seeds=tuple(int(s) for s in d["seeds"]),
            train_domain=int(d["train_domain"]),
            eval_domains=tuple(int(e) for e in d["eval_domains"]),
            val_fraction=float(d["val_fraction"]),
        )


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"


def config_from_json(text: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(text))


def load_config(path) -> ExperimentConfig:
    return config_from_json(Path(path).read_text())


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def generate_dataset(cfg: ExperimentConfig, out_dir) -> None:
    """Write the train (single-domain) and eval (all-domain) splits."""
    ds = cfg.dataset
    count_range = (ds.count_min, ds.count_max)
    train_domain = DOMAIN_TABLE[cfg.train_domain]
    train = make_dataset(ds.n_train_per_class, [train_domain], ds.resolution,
                         ds.base_seed, count_range)
    eval_seed = derive_seed(ds.base_seed, 424242)
    evals = make_dataset(ds.n_eval_per_class, DOMAIN_TABLE, ds.resolution,
                         eval_seed, count_range)
    write_dataset(out_dir, {"train": train, "eval": evals}, ds.resolution,
                  ds.base_seed, domains=DOMAIN_TABLE,
                  meta={"config_hash": config_hash(cfg)})


# ---------------------------------------------------------------------------
# Loss-and-gradient steps (also the surface the gradient checks probe)
# ---------------------------------------------------------------------------

def morphgen_loss_and_grads(arch: ArchConfig, enc, head, x_img, x_aug, x_mask3,
                            y, ccfg: ContrastiveConfig,
                            need_input_grads: bool = False):
    """Full objective value and flat parameter gradient for one batch.

    The same encoder parameters embed the raw patches, their
    augmentations, and the channel-replicated masks. The classifier head
    scores the augmented-patch embeddings (the network's training view,
    which the attraction term keeps aligned with the mask anchors) for
    the primary prediction, and the mask embeddings for the secondary
    prediction; raw-patch embeddings serve as the negatives. Returns
    (LossBreakdown, grad_vector, input_grads) where input_grads is a
    {"img", "aug", "mask"} dict when requested.
    """
    z_img, c_img = model.encode(enc, x_img, arch)
    z_aug, c_aug = model.encode(enc, x_aug, arch)
    z_mask, c_mask = model.encode(enc, x_mask3, arch)
    p, _ = model.classify(head, z_aug)
    p_prime, _ = model.classify(head, z_mask)
    emb = BatchEmbeddings(z_mask=z_mask, z_aug=z_aug, z_img=z_img)
    breakdown, lg = losses.total_loss(emb, ccfg, LabelBatch(y, p, p_prime))

    dw1, db1, dz1 = model.head_backward(head, z_aug, lg["logits"])
    dw2, db2, dz2 = model.head_backward(head, z_mask, lg["logits_prime"])
    g_img, dx_img = model.backward(enc, c_img, lg["z_img"], arch,
                                   need_input_grad=need_input_grads)
    g_aug, dx_aug = model.backward(enc, c_aug, lg["z_aug"] + dz1, arch,
                                   need_input_grad=need_input_grads)
    g_mask, dx_mask = model.backward(enc, c_mask, lg["z_mask"] + dz2, arch,
                                     need_input_grad=need_input_grads)
    grad_vec = (model.grads_to_vector(g_img, dw1 + dw2, db1 + db2)
                + model.grads_to_vector(g_aug, np.zeros_like(head.weight), 0.0)
                + model.grads_to_vector(g_mask, np.zeros_like(head.weight), 0.0))
    input_grads = None
    if need_input_grads:
        input_grads = {"img": dx_img, "aug": dx_aug, "mask": dx_mask}
    return breakdown, grad_vec, input_grads


def erm_loss_and_grads(arch: ArchConfig, enc, head, x_img, y,
                       need_input_grads: bool = False):
    """Plain classification objective (the ERM baseline)."""
    z, cache = model.encode(enc, x_img, arch)
    p, _ = model.classify(head, z)
    value, g_logits = losses.bce(y, p)
    dw, db, dz = model.head_backward(head, z, g_logits)
    grads, dx = model.backward(enc, cache, dz, arch,
                               need_input_grad=need_input_grads)
    breakdown = LossBreakdown(attract=0.0, repel=0.0, align=0.0,
                              bce=value, total=value)
    return breakdown, model.grads_to_vector(grads, dw, db), dx


# ---------------------------------------------------------------------------
# Model adapters used by robustness / attribution / evaluation
# ---------------------------------------------------------------------------

def predict_probs(arch: ArchConfig, enc, head, images: np.ndarray,
                  batch_size: int = 128) -> np.ndarray:
    probs = []
    for start in range(0, images.shape[0], batch_size):
        z, _ = model.encode(enc, images[start:start + batch_size], arch)
        p, _ = model.classify(head, z)
        probs.append(p)
    return np.concatenate(probs)


def predict_labels(arch: ArchConfig, enc, head, images: np.ndarray) -> np.ndarray:
    # Decision threshold 0.5; an exact tie maps to class 0.
    return (predict_probs(arch, enc, head, images) > 0.5).astype(np.int64)


def make_predict_fn(arch: ArchConfig, enc, head):
    return lambda images: predict_labels(arch, enc, head, images)


def make_bce_grad_fn(arch: ArchConfig, enc, head):
    """Input gradient of the mean BCE; what PGD climbs."""
    def grad_fn(x, y):
        z, cache = model.encode(enc, x, arch)
        p, _ = model.classify(head, z)
        _, g_logits = losses.bce(y, p)
        _, _, dz = model.head_backward(head, z, g_logits)
        _, dx = model.backward(enc, cache, dz, arch, need_input_grad=True)
        return dx
    return grad_fn


def make_logit_fns(arch: ArchConfig, enc, head):
    """(logit_fn, logit_grad_fn) over class-1 logits, for attribution."""
    def logit_fn(x):
        z, _ = model.encode(enc, x, arch)
        _, logits = model.classify(head, z)
        return logits

    def logit_grad_fn(x):
        z, cache = model.encode(enc, x, arch)
        dz = np.broadcast_to(head.weight[None, :], z.shape)
        _, dx = model.backward(enc, cache, dz, arch, need_input_grad=True)
        return dx

    return logit_fn, logit_grad_fn


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_slices(n: int, batch_size: int) -> list:
    """Contiguous chunks; a trailing singleton is folded into its neighbor."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        bounds.pop(-2)
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def train_run(cfg: ExperimentConfig, data_dir, seed: int, out_dir) -> dict:
    """Train one seed; saves checkpoints and the per-epoch log."""
    from .perf import tune_allocator
    tune_allocator()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = read_split(data_dir, "train",
                       require_masks=(cfg.objective == "morphgen"))
    n = len(split)
    order = rng_from(cfg.dataset.base_seed, 5151).permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_idx, train_idx = order[:n_val], order[n_val:]
    steps_per_epoch = len(_batch_slices(len(train_idx), cfg.batch_size))

    sched = optim.ScheduleConfig(peak_lr=cfg.peak_lr,
                                 warmup_epochs=cfg.warmup_epochs,
                                 total_epochs=cfg.total_epochs,
                                 steps_per_epoch=steps_per_epoch)
    enc, head = model.init_params(cfg.arch, seed)
    params = model.to_vector(enc, head)
    opt_state = optim.AdamWState.init(params.size, **cfg.optimizer.to_dict())
    swa = optim.SwaState(start_epoch=cfg.swa_start_epoch)

    log_rows = []
    step = 0
    for epoch in range(1, cfg.total_epochs + 1):
        perm = train_idx[rng_from(seed, 31, epoch).permutation(len(train_idx))]
        epoch_lr = optim.lr_at(sched, step)
        sums = {"attract": 0.0, "repel": 0.0, "bce": 0.0, "total": 0.0}
        for lo, hi in _batch_slices(len(perm), cfg.batch_size):
            idx = perm[lo:hi]
            enc, head = model.from_vector(params, cfg.arch)
            x_img = split.images[idx]
            y = split.labels[idx].astype(np.float64)
            if cfg.objective == "morphgen":
                x_aug = np.stack([
                    augment(split.images[i], cfg.augment,
                            derive_seed(seed, 41, epoch, int(i)))
                    for i in idx
                ])
                x_mask3 = model.replicate_mask_channels(split.masks[idx])
                breakdown, grad_vec, _ = morphgen_loss_and_grads(
                    cfg.arch, enc, head, x_img, x_aug, x_mask3, y,
                    cfg.contrastive)
            else:
                breakdown, grad_vec, _ = erm_loss_and_grads(
                    cfg.arch, enc, head, x_img, y)
            if not math.isfinite(breakdown.total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"{breakdown.as_dict()}"
                )
            lr = optim.lr_at(sched, step)
            params = optim.adamw_step(params, grad_vec, opt_state, lr)
            step += 1
            frac = len(idx) / len(perm)
            for k in sums:
                sums[k] += getattr(breakdown, k) * frac

        enc, head = model.from_vector(params, cfg.arch)
        val_acc = float(np.mean(
            predict_labels(cfg.arch, enc, head, split.images[val_idx])
            == split.labels[val_idx]
        )) if n_val > 0 else float("nan")
        if cfg.use_swa and epoch >= cfg.swa_start_epoch:
            swa = optim.swa_update(swa, params)
        log_rows.append({
            "epoch": epoch, "lr": epoch_lr,
            "attract": sums["attract"], "repel": sums["repel"],
            "bce": sums["bce"], "total": sums["total"],
            "val_accuracy": val_acc,
        })

    meta = {"seed": seed, "objective": cfg.objective,
            "config_hash": config_hash(cfg)}
    enc, head = model.from_vector(params, cfg.arch)
    model.save_checkpoint(out / "ckpt_final", cfg.arch, enc, head,
                          extra={"adam_m": opt_state.m, "adam_v": opt_state.v},
                          meta={**meta, "weights": "final",
                                "adam_t": opt_state.t})
    if cfg.use_swa:
        swa_vec = optim.swa_finalize(swa)
        enc_s, head_s = model.from_vector(swa_vec, cfg.arch)
        model.save_checkpoint(out / "ckpt_swa", cfg.arch, enc_s, head_s,
                              meta={**meta, "weights": "swa",
                                    "n_models": swa.n_models})
    _write_csv(out / "train_log.csv",
               ["epoch", "lr", "attract", "repel", "bce", "total", "val_accuracy"],
               log_rows)
    (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return {"log": log_rows, "out_dir": str(out)}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_checkpoint(ckpt_path, data_dir, domain_id: int,
                    out_csv=None, split: str = "eval") -> float:
    """Accuracy of a saved model on one domain; images only, never masks."""
    arch, enc, head, _, _ = model.load_checkpoint(ckpt_path)
    data = read_split(data_dir, split, require_masks=False).filter_domain(domain_id)
    probs = predict_probs(arch, enc, head, data.images)
    preds = (probs > 0.5).astype(np.int64)
    acc = float(np.mean(preds == data.labels))
    if out_csv is not None:
        rows = [{
            "index": i,
            "geometry_seed": data.geometry_seeds[i],
            "domain": int(data.domain_ids[i]),
            "label": int(data.labels[i]),
            "prob": repr(float(probs[i])),
            "pred": int(preds[i]),
        } for i in range(len(data))]
        _write_csv(out_csv, ["index", "geometry_seed", "domain", "label",
                             "prob", "pred"], rows)
    return acc


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _mean_sd(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, sd


# ---------------------------------------------------------------------------
# Experiments and reports
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, work_dir) -> dict:
    """Train every seed, evaluate every eval domain, write the report.

    A failure in any seed propagates and aborts the whole report; seeds
    are never silently dropped.
    """
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    data_dir = work / "dataset"
    if not (data_dir / "manifest.json").exists():
        generate_dataset(cfg, data_dir)

    per_seed = []
    for seed in cfg.seeds:
        run_dir = work / f"seed{seed}"
        train_run(cfg, data_dir, seed, run_dir)
        primary = run_dir / ("ckpt_swa" if cfg.use_swa else "ckpt_final")
        domain_acc = {}
        domain_acc_final = {}
        for dom in cfg.eval_domains:
            domain_acc[str(dom)] = eval_checkpoint(
                primary, data_dir, dom,
                out_csv=run_dir / f"predictions_domain{dom}.csv")
            domain_acc_final[str(dom)] = eval_checkpoint(
                run_dir / "ckpt_final", data_dir, dom)
        ood_mean = float(np.mean(list(domain_acc.values())))
        per_seed.append({
            "seed": seed,
            "domain_accuracy": domain_acc,
            "domain_accuracy_final": domain_acc_final,
            "ood_mean": ood_mean,
        })

    domains = [str(d) for d in cfg.eval_domains]
    per_domain = {}
    for dom in domains:
        mean, sd = _mean_sd([ps["domain_accuracy"][dom] for ps in per_seed])
        per_domain[dom] = {"mean": mean, "sd": sd}
    ood_mean, ood_sd = _mean_sd([ps["ood_mean"] for ps in per_seed])
    domain_means = [per_domain[d]["mean"] for d in domains]
    cross_domain_sd = float(np.std(domain_means, ddof=1)) if len(domains) > 1 else 0.0

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "objective": cfg.objective,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "per_seed": per_seed,
        "aggregate": {
            "per_domain": per_domain,
            "ood_mean": ood_mean,
            "ood_mean_sd": ood_sd,
            "cross_domain_sd": cross_domain_sd,
        },
    }
    (work / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    rows = [{
        "objective": cfg.objective,
        "seed": ps["seed"],
        "domain": dom,
        "accuracy": repr(ps["domain_accuracy"][dom]),
        "accuracy_final_weights": repr(ps["domain_accuracy_final"][dom]),
    } for ps in per_seed for dom in domains]
    _write_csv(work / "accuracy.csv",
               ["objective", "seed", "domain", "accuracy", "accuracy_final_weights"],
               rows)
    return report


def consolidate_reports(run_dirs, out_dir, with_figures: bool = True) -> dict:
    """Merge run reports into comparison tables (and figures).

    Merging is keyed by (objective, domain, seed) and sorted, so the
    output is independent of the order run_dirs are passed in.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for rd in run_dirs:
        path = Path(rd) / "report.json"
        rep = json.loads(path.read_text())
        if rep.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(
                f"report schema mismatch in {path}: "
                f"{rep.get('schema_version')} != {REPORT_SCHEMA_VERSION}"
            )
        rep["_dir"] = str(Path(rd))
        reports.append(rep)
    reports.sort(key=lambda r: (r["objective"], r["config_hash"], r["_dir"]))

    rows = []
    for rep in reports:
        for ps in rep["per_seed"]:
            for dom in sorted(ps["domain_accuracy"], key=int):
                rows.append({
                    "objective": rep["objective"],
                    "domain": int(dom),
                    "seed": ps["seed"],
                    "accuracy": repr(ps["domain_accuracy"][dom]),
                })
    rows.sort(key=lambda r: (r["objective"], r["domain"], r["seed"]))
    _write_csv(out / "consolidated.csv",
               ["objective", "domain", "seed", "accuracy"], rows)

    comparison = {"schema_version": REPORT_SCHEMA_VERSION, "objectives": {}}
    for rep in reports:
        comparison["objectives"][rep["objective"]] = rep["aggregate"]
    objs = comparison["objectives"]
    if "morphgen" in objs and "erm" in objs:
        comparison["ood_gap"] = objs["morphgen"]["ood_mean"] - objs["erm"]["ood_mean"]
    (out / "comparison.json").write_text(
        json.dumps(comparison, sort_keys=True, indent=2) + "\n")

    corruption_rows = _merge_robustness(reports, "corrupt_eval.csv",
                                        ["kind", "severity", "seed"])
    attack_rows = _merge_robustness(reports, "attack_eval.csv",
                                    ["epsilon", "seed"])
    if corruption_rows:
        _write_csv(out / "corruption.csv",
                   ["objective", "kind", "severity", "seed", "accuracy"],
                   corruption_rows)
    if attack_rows:
        _write_csv(out / "attack.csv",
                   ["objective", "epsilon", "seed", "accuracy"], attack_rows)

    if with_figures:
        from . import figures
        figures.report_figures(reports, out)
        if corruption_rows:
            by_obj = _severity_means(corruption_rows, "severity")
            figures.save_robustness_curves(
                by_obj, "severity", out / "figures" / "corruption_accuracy.png",
                "accuracy under corruption (mean over kinds and seeds)",
                "severity")
        if attack_rows:
            by_obj = _severity_means(attack_rows, "epsilon")
            figures.save_robustness_curves(
                by_obj, "epsilon", out / "figures" / "attack_accuracy.png",
                "robust accuracy under L-inf PGD", "epsilon (1/255 units)")
    return comparison


def _merge_robustness(reports, filename: str, key_fields) -> list:
    """Collect per-run robustness CSVs (written next to report.json)."""
    rows = []
    for rep in reports:
        path = Path(rep["_dir"]) / filename
        if not path.exists():
            continue
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append({"objective": rep["objective"], **row})
    rows.sort(key=lambda r: (r["objective"],
                             *(float(r[k]) for k in key_fields)))
    return rows


def _severity_means(rows, x_key: str) -> dict:
    """Average accuracy per (objective, x) over everything else."""
    acc = {}
    for row in rows:
        key = (row["objective"], float(row[x_key]))
        acc.setdefault(key, []).append(float(row["accuracy"]))
    by_obj = {}
    for (obj, x), vals in sorted(acc.items()):
        by_obj.setdefault(obj, []).append(
            {x_key: x, "accuracy": float(np.mean(vals))})
    return by_obj
