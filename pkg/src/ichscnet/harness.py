"""Training loop, stratified k-fold cross-validation, ablation matrix, checkpoints and reports."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .classifier_head import ClassifierConfig
from .encoders import FROZEN
from .losses import LossWeights, class_weights, downsample_mask
from .model import MODES, Batch, ICHSCNet, ModelConfig, case_prompt_seed
from .sam_clip import synthesize_prompts
from .synth_data import DatasetError, DatasetManifest, load_dataset

log = logging.getLogger(__name__)

FULL_BATCH_SIZE = 32


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class RunConfig:
    mode: str = "full"
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 25
    folds: int = 5
    seed: int = 0
    gamma: tuple = (1.0, 0.75, 0.5, 0.25)
    alpha: float = 0.2
    beta: float = 0.8
    epsilon_smooth: float = 1e-6
    epsilon_prob: float = 1e-6
    mta_variant: str = "symmetric_kl"
    dataset_dir: str = ""
    output_dir: str = "runs/default"
    precision: str = "single"
    grad_clip: float = 5.0
    # train on every case and evaluate on the same cases (overfit / smoke experiments)
    train_on_all: bool = False
    # model size knobs
    base_channels: int = 16
    text_dim: int = 64
    prompt_dim: int = 64
    attn_dim: int = 64
    mask_channels: int = 32
    fused_channels: int = 32
    dense_blocks: int = 2
    growth_rate: int = 8
    layers_per_block: int = 3
    k_fg: int = 3
    k_bg: int = 1
    vm_skip: bool = True
    save_checkpoints: bool = True

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dtype(self):
        return torch.float64 if self.precision == "double" else torch.float32

    def loss_weights(self, xi=(1.0, 1.0)) -> LossWeights:
        return LossWeights(
            gamma=self.gamma,
            alpha=self.alpha,
            beta=self.beta,
            xi=xi,
            epsilon_smooth=self.epsilon_smooth,
            epsilon_prob=self.epsilon_prob,
            mta_variant=self.mta_variant,
        )

    def model_config(self, image_size: int, seed: int | None = None) -> ModelConfig:
        return ModelConfig(
            image_size=image_size,
            base_channels=self.base_channels,
            text_dim=self.text_dim,
            prompt_dim=self.prompt_dim,
            attn_dim=self.attn_dim,
            mask_channels=self.mask_channels,
            fused_channels=self.fused_channels,
            classifier=ClassifierConfig(self.dense_blocks, self.growth_rate, self.layers_per_block),
            k_fg=self.k_fg,
            k_bg=self.k_bg,
            vm_skip=self.vm_skip,
            seed=self.seed if seed is None else seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma"] = list(self.gamma)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def full_protocol(cls, **kw) -> "RunConfig":
        """Full-size protocol: batch 32, 25 epochs, five folds."""
        return cls(batch_size=FULL_BATCH_SIZE, epochs=25, folds=5, **kw)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        d = self.to_dict()
        types = {f.name: f.type for f in fields(self)}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            k, v = item.split("=", 1)
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = _coerce(v, d[k])
        return RunConfig.from_dict(d)


def _coerce(text: str, current):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(current, bool):
        if isinstance(value, str):
            value = value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list[str]
    val_ids: list[str]


def make_folds(manifest: DatasetManifest, folds: int, seed: int) -> list[FoldSplit]:
    """Stratified, seeded k-fold split; class c is dealt round-robin, continuing where the previous class stopped."""
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    ids = [c.case_id for c in manifest.cases]
    labels = manifest.labels
    for cls in (0, 1):
        n = int((labels == cls).sum())
        if n < folds:
            raise DatasetError(f"class {cls} has {n} cases, fewer than {folds} folds")
    rng = np.random.default_rng([int(seed), 7919])
    buckets = [[] for _ in range(folds)]
    pos = 0
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for i in idx:
            buckets[pos % folds].append(int(i))
            pos += 1
    out = []
    for k in range(folds):
        val = sorted(buckets[k])
        val_set = set(val)
        out.append(
            FoldSplit(
                fold_index=k,
                train_ids=[ids[i] for i in range(len(ids)) if i not in val_set],
                val_ids=[ids[i] for i in val],
            )
        )
    return out


def check_folds(manifest: DatasetManifest, splits: list[FoldSplit]) -> None:
    """Raises if the validation sets do not partition the dataset or are not stratified within +-1."""
    all_ids = [c.case_id for c in manifest.cases]
    seen = [i for s in splits for i in s.val_ids]
    if sorted(seen) != sorted(all_ids):
        raise AssertionError("validation folds are not a partition of the dataset")
    lab = {c.case_id: c.label for c in manifest.cases}
    k = len(splits)
    for cls in (0, 1):
        n_c = sum(1 for v in lab.values() if v == cls)
        for s in splits:
            got = sum(1 for i in s.val_ids if lab[i] == cls)
            if abs(got - n_c / k) > 1:
                raise AssertionError(f"fold {s.fold_index} has {got} of class {cls}, expected ~{n_c / k:.2f}")
        for s in splits:
            if set(s.train_ids) & set(s.val_ids):
                raise AssertionError(f"fold {s.fold_index}: train and val overlap")


# ---------------------------------------------------------------------------
# data


class CaseTable:
    """All cases of a manifest as tensors, with prompts synthesized once per (seed, case)."""

    def __init__(self, manifest: DatasetManifest, seed: int, k_fg: int, k_bg: int, dtype=torch.float32):
        cases = manifest.cases
        self.ids = [c.case_id for c in cases]
        self.index = {cid: i for i, cid in enumerate(self.ids)}
        self.images = torch.as_tensor(np.stack([c.image for c in cases]).astype(np.float64) / 255.0, dtype=dtype)[:, None]
        self.gts = torch.as_tensor(np.stack([c.gt_mask for c in cases]).astype(np.float64), dtype=dtype)[:, None]
        self.texts = [c.text.rendered for c in cases]
        self.labels = torch.as_tensor([c.label for c in cases], dtype=torch.long)
        self.prompts = [
            synthesize_prompts(c.bbox, c.rough_mask, case_prompt_seed(seed, c.case_id), k_fg, k_bg) for c in cases
        ]

    def batch(self, ids) -> Batch:
        idx = [self.index[i] for i in ids]
        t = torch.as_tensor(idx)
        return Batch(
            image=self.images[t],
            texts=[self.texts[i] for i in idx],
            prompts=[self.prompts[i] for i in idx],
            gt=self.gts[t],
            labels=self.labels[t],
            case_ids=list(ids),
        )


# ---------------------------------------------------------------------------
# training


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def build_model(config: RunConfig, image_size: int, fold: int = 0) -> ICHSCNet:
    model = ICHSCNet(config.model_config(image_size, seed=config.seed * 1000 + fold), config.mode)
    return model.to(config.dtype)


def make_optimizer(model: ICHSCNet, config: RunConfig):
    params = [p for p in model.trainable_parameters().values()]
    return torch.optim.AdamW(
        params, lr=config.lr, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay
    )


def train_steps(model, table: CaseTable, train_ids, config: RunConfig, weights: LossWeights, fold: int = 0,
                step_log=None, steps: int | None = None, on_step=None):
    """Runs epochs (or exactly ``steps`` optimizer steps) of AdamW; returns the list of step records."""
    opt = make_optimizer(model, config)
    trainable = [p for p in model.trainable_parameters().values()]
    rng = np.random.default_rng([int(config.seed), int(fold), 104729])
    records = []
    step = 0
    n = len(train_ids)
    n_batches = math.ceil(n / config.batch_size)
    total_steps = steps if steps is not None else config.epochs * n_batches
    epoch = 0
    model.train()
    while step < total_steps:
        order = rng.permutation(n)
        for b in range(n_batches):
            if step >= total_steps:
                break
            ids = [train_ids[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            batch = table.batch(ids)
            opt.zero_grad(set_to_none=True)
            out = model(batch)
            try:
                lb = model.compute_loss(out, batch, weights)
            except FloatingPointError as exc:
                raise NumericError(f"fold {fold} step {step}: {exc}") from None
            if not torch.isfinite(lb.total):
                raise NumericError(f"fold {fold} step {step}: non-finite total loss {float(lb.total.detach())}")
            lb.total.backward()
            if config.grad_clip and config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            opt.step()
            rec = {"fold": fold, "epoch": epoch, "step": step, **_detach_record(lb)}
            records.append(rec)
            if step_log is not None:
                step_log.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, lb)
            step += 1
        epoch += 1
    return records


def _detach_record(lb) -> dict:
    with torch.no_grad():
        return lb.as_record()


@torch.no_grad()
def predict(model: ICHSCNet, table: CaseTable, ids, batch_size: int = 16) -> dict:
    """Inference over ``ids``: thresholded S at full size, VM^0 and class probabilities."""
    model.eval()
    out = {"S": [], "vm0": [], "p_poor": []}
    for i in range(0, len(ids), batch_size):
        batch = table.batch(ids[i : i + batch_size])
        res = model(batch)
        if res.stages.S is not None:
            out["S"].append(res.stages.S[:, 0].cpu())
        out["vm0"].append(res.vms.masks[0][:, 0].cpu())
        if res.cla_logits is not None:
            out["p_poor"].append(torch.softmax(res.cla_logits, -1)[:, 1].cpu())
    return {k: (torch.cat(v) if v else None) for k, v in out.items()}


def evaluate_ids(model: ICHSCNet, table: CaseTable, ids) -> dict:
    pred = predict(model, table, ids)
    spec = model.spec
    idx = [table.index[i] for i in ids]
    gts = table.gts[torch.as_tensor(idx)][:, 0]
    rows = []
    result = {"n": len(ids)}
    if spec.seg:
        seg = []
        for k, cid in enumerate(ids):
            s = M.seg_scores((pred["S"][k] >= 0.5).numpy(), gts[k].numpy() >= 0.5)
            seg.append(s)
            rows.append({"case_id": cid, "dsc": s.dsc, "jaccard": s.jaccard, "hd95": s.hd95, "pro": s.pro})
        result["seg"] = M.aggregate(seg)
    vm_gt = downsample_mask(gts[:, None], pred["vm0"].shape[-2:])[:, 0]
    vm_dsc = [M.dsc((pred["vm0"][k] >= 0.5).numpy(), vm_gt[k].numpy() >= 0.5) for k in range(len(ids))]
    result["vm0_dsc"] = float(np.mean(vm_dsc))
    if spec.cla:
        p = pred["p_poor"].double().numpy()
        labels = table.labels[torch.as_tensor(idx)].numpy()
        cs = M.classification_scores(p, labels)
        result["cla"] = asdict(cs)
        for k in range(len(ids)):
            if k < len(rows):
                rows[k]["p_poor"] = float(p[k])
                rows[k]["label"] = int(labels[k])
            else:
                rows.append({"case_id": ids[k], "p_poor": float(p[k]), "label": int(labels[k])})
    result["cases"] = rows
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ICHSCNet, config: RunConfig, fold: int, rng_state=None) -> None:
    groups = {g: {n: p.detach().cpu().clone() for n, p in params.items()} for g, params in model.parameter_groups().items()}
    buffers = {n: b.detach().cpu().clone() for n, b in model.named_buffers()}
    torch.save(
        {
            "format": "ichscnet-ckpt-1",
            "mode": model.mode,
            "groups": groups,
            "buffers": buffers,
            "trainability": dict(model.trainability),
            "model_config": model.config.to_dict(),
            "run_config": config.to_dict(),
            "fold": fold,
            "vocab": getattr(getattr(model, "text_encoder", None), "vocab", None),
            "rng_state": rng_state if rng_state is not None else torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path) -> tuple[ICHSCNet, RunConfig, dict]:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for truncated/garbled files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(ckpt, dict) or ckpt.get("format") != "ichscnet-ckpt-1":
        raise CheckpointError(f"{path} is not an ichscnet checkpoint")
    try:
        config = RunConfig.from_dict(ckpt["run_config"])
        mcfg = ModelConfig.from_dict(ckpt["model_config"])
        model = ICHSCNet(mcfg, ckpt["mode"], trainability=ckpt["trainability"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has an invalid header: {exc}") from None
    expected = model.parameter_groups()
    got = ckpt["groups"]
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter group mismatch for mode {ckpt['mode']}: missing {missing}, extra {extra}")
    state = {}
    for g, params in expected.items():
        if set(params) != set(got[g]):
            raise CheckpointError(f"group {g!r}: parameter names differ from the model")
        for n, p in params.items():
            if got[g][n].shape != p.shape:
                raise CheckpointError(f"group {g!r}: {n} has shape {tuple(got[g][n].shape)}, expected {tuple(p.shape)}")
            state[n] = got[g][n]
    state.update(ckpt.get("buffers", {}))
    dtype = next(iter(next(iter(got.values())).values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state, strict=True)
    return model, config, ckpt


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunReport:
    mode: str
    folds: list[dict]
    mean: dict
    config: dict
    wall_time: float
    steps_log: str | None = None
    frozen_unchanged: bool | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def mean_over_folds(folds: list[dict]) -> dict:
    out = {}
    for task, keys in (("cla", M.CLA_KEYS), ("seg", M.SEG_KEYS)):
        entries = [f[task] for f in folds if task in f]
        if entries:
            out[task] = {k: float(np.mean([e[k] for e in entries])) for k in keys}
    out["vm0_dsc"] = float(np.mean([f["vm0_dsc"] for f in folds]))
    return out


def _prepare(config: RunConfig, manifest: DatasetManifest | None):
    if manifest is None:
        if not config.dataset_dir:
            raise ConfigError("dataset_dir is not set")
        manifest = load_dataset(config.dataset_dir)
    h, w = manifest.image_size
    if h != w:
        raise DatasetError(f"square images required, got {h}x{w}")
    return manifest, h


def train(config: RunConfig, manifest: DatasetManifest | None = None, write: bool = True) -> RunReport:
    """Cross-validated (or train-on-all) training per ``config``; writes the run directory when ``write``."""
    t0 = time.time()
    manifest, size = _prepare(config, manifest)
    set_determinism(config.seed)
    out_dir = Path(config.output_dir)
    if write:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    if config.train_on_all:
        ids = [c.case_id for c in manifest.cases]
        splits = [FoldSplit(0, ids, ids)]
    else:
        splits = make_folds(manifest, config.folds, config.seed)
        check_folds(manifest, splits)
    if write:
        (out_dir / "folds.json").write_text(json.dumps([asdict(s) for s in splits], indent=1) + "\n", encoding="utf-8")
    table = CaseTable(manifest, config.seed, config.k_fg, config.k_bg, config.dtype)
    labels = {c.case_id: c.label for c in manifest.cases}

    fold_results = []
    all_cases = []
    frozen_ok = True
    step_log = open(out_dir / "steps.jsonl", "w", encoding="utf-8") if write else None
    try:
        for split in splits:
            model = build_model(config, size, split.fold_index)
            frozen_before = {n: p.detach().clone() for n, p in model.frozen_parameters().items()}
            xi = class_weights([labels[i] for i in split.train_ids])
            weights = config.loss_weights(xi)
            train_steps(model, table, split.train_ids, config, weights, split.fold_index, step_log)
            frozen_ok &= all(torch.equal(frozen_before[n], p) for n, p in model.frozen_parameters().items())
            res = evaluate_ids(model, table, split.val_ids)
            res["fold"] = split.fold_index
            for row in res.pop("cases"):
                all_cases.append({"fold": split.fold_index, **row})
            fold_results.append(res)
            if write and config.save_checkpoints:
                save_checkpoint(out_dir / "checkpoints" / f"fold{split.fold_index}.ckpt", model, config, split.fold_index)
            log.info("fold %d: %s", split.fold_index, {k: v for k, v in res.items() if k != "cases"})
    finally:
        if step_log is not None:
            step_log.close()
    report = RunReport(
        mode=config.mode,
        folds=fold_results,
        mean=mean_over_folds(fold_results),
        config=config.to_dict(),
        wall_time=time.time() - t0,
        steps_log=str(out_dir / "steps.jsonl") if write else None,
        frozen_unchanged=frozen_ok,
        metadata={
            "positive_class": "poor prognosis (label 1)",
            "aggregation": "per-fold macro over cases; mean over folds is primary, pooled pixel variants alongside",
            "dataset_seed": manifest.seed,
            "generator_version": manifest.generator_version,
        },
    )
    if write:
        write_report(out_dir, report, all_cases)
    return report


def write_report(out_dir, report: RunReport, case_rows: list[dict]) -> None:
    out_dir = Path(out_dir)
    M.write_aggregate_json(out_dir / "report.json", report.to_dict(), {"mode": report.mode})
    M.write_case_csv(out_dir / "report.csv", case_rows)


def evaluate(checkpoint, dataset_dir, case_ids=None) -> RunReport:
    """Inference-only pass of a saved checkpoint over ``case_ids`` (default: every case)."""
    t0 = time.time()
    model, config, ckpt = load_checkpoint(checkpoint)
    manifest = load_dataset(dataset_dir)
    dtype = next(model.parameters()).dtype
    table = CaseTable(manifest, config.seed, model.config.k_fg, model.config.k_bg, dtype)
    ids = list(case_ids) if case_ids is not None else table.ids
    unknown = [i for i in ids if i not in table.index]
    if unknown:
        raise DatasetError(f"case ids not in dataset: {unknown[:5]}")
    res = evaluate_ids(model, table, ids)
    res.pop("cases")
    res["fold"] = ckpt.get("fold", 0)
    return RunReport(
        mode=model.mode,
        folds=[res],
        mean=mean_over_folds([res]),
        config=config.to_dict(),
        wall_time=time.time() - t0,
        metadata={"checkpoint": str(checkpoint), "dataset_dir": str(dataset_dir)},
    )


# ---------------------------------------------------------------------------
# ablation table

COLUMNS = ("Acc", "Rec", "Pre", "AUC", "DSC", "Jaccard", "95HD", "PRO")
_COLUMN_KEYS = (("cla", "acc"), ("cla", "rec"), ("cla", "pre"), ("cla", "auc"),
                ("seg", "dsc"), ("seg", "jaccard"), ("seg", "hd95"), ("seg", "pro"))
ABLATION_ORDER = ("cla_only", "seg_only", "sam_only", "clip_only", "sam_clip_no_mtff",
                  "sam_plus_mtff", "clip_plus_mtff", "full")


def table_row(mode: str, mean: dict) -> list[str]:
    """Eight formatted cells; tasks a mode does not report are '-'."""
    reported = MODES[mode].reported
    cells = []
    for task, key in _COLUMN_KEYS:
        if task not in reported or task not in mean:
            cells.append("-")
        else:
            v = mean[task][key]
            cells.append("nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}")
    return cells


def render_table(rows: list[tuple[str, list[str]]]) -> str:
    header = ["Method", *COLUMNS]
    body = [[name, *cells] for name, cells in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(r):
        first = r[0].ljust(widths[0])
        cla = " ".join(c.rjust(w) for c, w in zip(r[1:5], widths[1:5]))
        seg = " ".join(c.rjust(w) for c, w in zip(r[5:], widths[5:]))
        return f"{first} | {cla} | {seg}"

    sep = "-" * len(line(header))
    return "\n".join([sep, line(header), sep, *(line(r) for r in body), sep])


def ablate(base: RunConfig, manifest: DatasetManifest | None = None, modes=ABLATION_ORDER, write: bool = True) -> dict:
    """Runs every mode with shared folds and seed; returns {"rows": [(mode, cells)], "reports": {...}}."""
    manifest, _ = _prepare(base, manifest)
    base_dir = Path(base.output_dir)
    reports = {}
    rows = []
    for mode in modes:
        cfg = RunConfig.from_dict({**base.to_dict(), "mode": mode, "output_dir": str(base_dir / mode)})
        rep = train(cfg, manifest, write=write)
        reports[mode] = rep
        rows.append((mode, table_row(mode, rep.mean)))
    result = {"rows": rows, "reports": reports, "table": render_table(rows)}
    if write:
        base_dir.mkdir(parents=True, exist_ok=True)
        payload = {"columns": list(COLUMNS), "rows": [{"mode": m, "cells": c} for m, c in rows]}
        (base_dir / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        (base_dir / "ablation.txt").write_text(result["table"] + "\n", encoding="utf-8")
    return result


def render_run_dir(run_dir) -> str:
    """Aligned text table for a run directory (single run) or an ablation directory."""
    run_dir = Path(run_dir)
    abl = run_dir / "ablation.json"
    if abl.is_file():
        payload = json.loads(abl.read_text(encoding="utf-8"))
        return render_table([(r["mode"], r["cells"]) for r in payload["rows"]])
    rep = run_dir / "report.json"
    if not rep.is_file():
        raise FileNotFoundError(f"no report.json or ablation.json in {run_dir}")
    payload = json.loads(rep.read_text(encoding="utf-8"))["scores"]
    rows = [(f"fold{f['fold']}", table_row(payload["mode"], f)) for f in payload["folds"]]
    rows.append(("mean", table_row(payload["mode"], payload["mean"])))
    return f"mode: {payload['mode']}\n" + render_table(rows)


def frozen_snapshot(model: ICHSCNet) -> dict:
    return {n: p.detach().clone() for n, p in model.frozen_parameters().items()}


def frozen_groups(model: ICHSCNet) -> list[str]:
    return sorted(g for g, flag in model.trainability.items() if flag == FROZEN)
