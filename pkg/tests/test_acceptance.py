"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""
import json
import math
import statistics
import time

import numpy as np
import pytest
import torch

import oracles
from ichscnet import harness as H
from ichscnet import losses as L
from ichscnet import metrics as M
from ichscnet.harness import RunConfig
from ichscnet.model import MODES, ICHSCNet, ModelConfig, make_batch
from ichscnet.synth_data import generate_dataset, load_dataset

COLUMNS = ["Acc", "Rec", "Pre", "AUC", "DSC", "Jaccard", "95HD", "PRO"]
CLA_COLS, SEG_COLS = set(COLUMNS[:4]), set(COLUMNS[4:])


def verdict(capsys, number, title, ok, detail=""):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title} {detail}".rstrip())
    assert ok, f"criterion {number} failed: {detail}"


# -- 1, 2: metrics ------------------------------------------------------------


@pytest.fixture(scope="module")
def mask_pairs():
    return oracles.random_mask_pairs(200, size=16, seed=2024)


def test_c1_metric_oracles(capsys, mask_pairs):
    t0 = time.time()
    worst, mismatches = 0.0, []
    for k, (a, b) in enumerate(mask_pairs):
        worst = max(worst, abs(M.dsc(a, b) - oracles.dsc(a, b)) / 100, abs(M.jaccard(a, b) - oracles.jaccard(a, b)) / 100)
        hd, hd_flag = M.hd95(a, b)
        if a.any() and b.any():
            if hd_flag or hd != oracles.hd95(a, b):
                mismatches.append(("hd95", k))
        elif not hd_flag:
            mismatches.append(("hd95 flag", k))
        pr, pr_flag = M.pro(a, b)
        if b.any():
            if pr_flag or pr != oracles.pro(a, b):
                mismatches.append(("pro", k))
        elif not (pr_flag and math.isnan(pr)):
            mismatches.append(("pro flag", k))
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and not mismatches and elapsed < 30
    verdict(capsys, 1, "metric oracle equivalence",
            ok, f"(max overlap err {worst:.1e}, exact mismatches {mismatches[:5]}, {elapsed:.1f} s)")


def test_c2_dsc_jaccard_identity(capsys, mask_pairs):
    worst = 0.0
    for a, b in mask_pairs:
        j = M.jaccard(a, b) / 100
        worst = max(worst, abs(M.dsc(a, b) / 100 - 2 * j / (1 + j)))
    verdict(capsys, 2, "DSC = 2J/(1+J)", worst <= 1e-9, f"(max err {worst:.1e} over {len(mask_pairs)} pairs)")


# -- 3: losses ----------------------------------------------------------------


def test_c3_loss_identities(capsys):
    checks = {}
    s = torch.rand(2, 1, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(3)) * 0.98 + 0.01
    checks["mta zero when P equals S"] = abs(float(L.mta_loss(torch.cat([1 - s, s], 1), s))) <= 1e-9

    gt = torch.zeros(2, 1, 16, 16, dtype=torch.float64)
    gt[0, :, 3:9, 4:12] = 1
    gt[1, :, 10:14, 2:6] = 1
    masks = [gt] + [L.downsample_mask(gt, (16 >> k, 16 >> k)) for k in (1, 2, 3)]
    seg, _ = L.seg_loss(masks, gt, L.LossWeights(epsilon_smooth=1e-6))
    checks["seg ~0 on perfect masks"] = float(seg) <= 1e-4

    probs = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    checks["cla 0 when confident and correct"] = float(L.cla_loss(probs, [0, 1], eps=1e-12)) <= 1e-9

    P = torch.tensor([0.8, 0.2], dtype=torch.float64).view(1, 2, 1, 1)
    S = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
    checks["single-pixel mta 0.41588"] = abs(float(L.mta_loss(P, S)) - 0.41588) <= 1e-4

    w = L.LossWeights(alpha=0.2, beta=0.8)
    seg_t, cla_t, mta_t = (torch.tensor(v, dtype=torch.float64) for v in (1.7, 0.3, 0.05))
    b = L.total_loss(seg_t, [], cla_t, mta_t, w)
    checks["total = mta + a*seg + b*cla"] = float(b.total) == float(mta_t + 0.2 * seg_t + 0.8 * cla_t)

    failed = [k for k, v in checks.items() if not v]
    verdict(capsys, 3, "loss identities", not failed, f"(failed: {failed})" if failed else f"({len(checks)} checks)")


# -- 4: gradient check --------------------------------------------------------


def test_c4_gradient_check(capsys, tmp_path):
    t0 = time.time()
    m = generate_dataset(8, 4, tmp_path / "g", image_size=(32, 32))
    batch = make_batch(m.cases[:2], seed=0, dtype=torch.float64)
    model = ICHSCNet(ModelConfig(image_size=32, seed=0), "full").double()
    weights = L.LossWeights()

    def loss():
        return model.compute_loss(model(batch), batch, weights).total

    model.zero_grad(set_to_none=True)
    loss().backward()
    trainable = model.trainable_parameters()
    frozen_clean = all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in model.frozen_parameters().values())

    # one entry from every trainable tensor, then random extra entries up to the sample size
    rng = np.random.default_rng(0)
    names = sorted(trainable)
    picks = [(n, int(rng.integers(trainable[n].numel()))) for n in names]
    while len(picks) < max(240, len(names)):
        n = names[int(rng.integers(len(names)))]
        picks.append((n, int(rng.integers(trainable[n].numel()))))

    h, worst, bad, tiny = 1e-5, 0.0, [], 0
    with torch.no_grad():
        for name, idx in picks:
            flat = trainable[name].view(-1)
            analytic = float(trainable[name].grad.view(-1)[idx]) if trainable[name].grad is not None else 0.0
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss())
            flat[idx] = orig - h
            down = float(loss())
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            # floor well above the round-off of a central difference at this step
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
            tiny += max(abs(analytic), abs(numeric)) < 1e-7
            worst = max(worst, rel)
            if rel > 1e-3:
                bad.append((name, idx, analytic, numeric))
    elapsed = time.time() - t0
    ok = len(picks) >= 200 and not bad and frozen_clean and elapsed < 300
    verdict(capsys, 4, "gradient check", ok,
            f"({len(picks)} params, {tiny} below 1e-7, max rel err {worst:.1e}, frozen grads zero {frozen_clean}, {elapsed:.0f} s, bad {bad[:3]})")


# -- 5, 9: overfit run --------------------------------------------------------

OVERFIT_SIZE = 64


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    manifest = generate_dataset(8, 3, root / "data", image_size=(OVERFIT_SIZE, OVERFIT_SIZE))
    cfg = RunConfig(mode="full", lr=1e-3, epochs=200, batch_size=8, train_on_all=True,
                    dataset_dir=str(root / "data"), output_dir=str(root / "run"))
    t0 = time.time()
    report = H.train(cfg, manifest)
    return cfg, report, time.time() - t0, root / "run"


def test_c5_overfit(capsys, overfit):
    cfg, report, elapsed, run = overfit
    steps = [json.loads(line) for line in (run / "steps.jsonl").read_text().splitlines()]
    fold = report.folds[0]
    dsc, acc, vm0 = fold["seg"]["dsc"], fold["cla"]["acc"], fold["vm0_dsc"]
    ok = len(steps) == 200 and dsc >= 90 and acc == 100 and vm0 >= 70 and elapsed < 600
    verdict(capsys, 5, "overfit 8 cases", ok,
            f"(steps {len(steps)}, train DSC {dsc:.1f}, Acc {acc:.1f}, VM0 DSC {vm0:.1f}, {elapsed:.0f} s)")


def test_overfit_loss_trajectory(overfit):
    _, _, _, run = overfit
    totals = np.array([json.loads(line)["total"] for line in (run / "steps.jsonl").read_text().splitlines()])
    assert np.isfinite(totals).all()
    avg = np.convolve(totals, np.ones(20) / 20, mode="valid")[-100:]
    assert np.all(np.diff(avg) <= 1e-6), f"largest rise {np.diff(avg).max():.2e}"


def test_c9_frozen_invariance(capsys, overfit):
    cfg, report, _, run = overfit
    fresh = H.build_model(cfg, OVERFIT_SIZE, 0)
    trained, _, _ = H.load_checkpoint(run / "checkpoints" / "fold0.ckpt")
    init = fresh.frozen_parameters()
    after = trained.frozen_parameters()
    changed = [n for n in init if not torch.equal(init[n], after[n])]
    ok = set(init) == set(after) and len(init) > 0 and not changed and report.frozen_unchanged
    verdict(capsys, 9, "frozen parameters bitwise unchanged", ok, f"({len(init)} tensors, changed {changed[:3]})")


# -- 6: cross-modal necessity -------------------------------------------------

C6_SEEDS = (0, 1, 2)
C6_SIZE = 32
C6_EPOCHS = 30


def test_c6_text_helps_classification(capsys, tmp_path):
    t0 = time.time()
    manifest = generate_dataset(400, 11, tmp_path / "d", image_size=(C6_SIZE, C6_SIZE))
    gaps = []
    for seed in C6_SEEDS:
        accs = {}
        for mode in ("full", "sam_only"):
            cfg = RunConfig(mode=mode, seed=seed, lr=1e-3, epochs=C6_EPOCHS, folds=5, save_checkpoints=False,
                            dataset_dir=str(tmp_path / "d"), output_dir=str(tmp_path / f"{mode}{seed}"))
            accs[mode] = H.train(cfg, manifest, write=False).mean["cla"]["acc"]
        gaps.append(accs["full"] - accs["sam_only"])
        with capsys.disabled():
            print(f"\n  seed {seed}: full {accs['full']:.1f}  sam_only {accs['sam_only']:.1f}")
    elapsed = time.time() - t0
    gap = statistics.median(gaps)
    verdict(capsys, 6, "text improves val Acc", gap >= 5 and elapsed < 3600,
            f"(median gap {gap:.1f} points over seeds {C6_SEEDS}, {elapsed / 60:.1f} min)")


# -- 7: ablation table --------------------------------------------------------

# blank pattern of the comparison tables: which task block each row reports
EXPECTED_BLOCKS = {
    "cla_only": CLA_COLS,
    "seg_only": SEG_COLS,
    "sam_only": SEG_COLS,
    "clip_only": CLA_COLS,
    "sam_clip_no_mtff": CLA_COLS | SEG_COLS,
    "sam_plus_mtff": SEG_COLS,
    "clip_plus_mtff": CLA_COLS,
    "full": CLA_COLS | SEG_COLS,
}


def test_c7_ablation_table(capsys, tmp_path):
    generate_dataset(8, 2, tmp_path / "d", image_size=(32, 32))
    base = RunConfig(epochs=1, folds=2, batch_size=4, save_checkpoints=False,
                     dataset_dir=str(tmp_path / "d"), output_dir=str(tmp_path / "ablate"))
    result = H.ablate(base)
    rows = dict(result["rows"])
    problems = []
    if set(rows) != set(MODES) or len(rows) != 8:
        problems.append(f"modes {sorted(rows)}")
    for mode, cells in rows.items():
        if len(cells) != 8:
            problems.append(f"{mode}: {len(cells)} cells")
            continue
        filled = {c for c, v in zip(COLUMNS, cells) if v != "-"}
        if filled != EXPECTED_BLOCKS[mode]:
            problems.append(f"{mode}: filled {sorted(filled)}")
    header = [t for t in result["table"].splitlines()[1].split() if t != "|"]
    if header[-8:] != COLUMNS:
        problems.append(f"header {header}")
    if not (tmp_path / "ablate" / "ablation.txt").is_file():
        problems.append("ablation.txt missing")
    counts = {m: sum(v != "-" for v in rows[m]) for m in ("cla_only", "seg_only") if m in rows}
    verdict(capsys, 7, "ablation table 8x8 with blanks", not problems, f"(cla/seg-only filled {counts}, problems {problems})")


# -- 8: determinism and folds -------------------------------------------------


def test_c8_determinism_and_folds(capsys, tmp_path):
    generate_dataset(40, 8, tmp_path / "d", image_size=(32, 32))
    manifest = load_dataset(tmp_path / "d")

    def run(tag):
        cfg = RunConfig(precision="double", epochs=1, folds=5, batch_size=8, save_checkpoints=False,
                        dataset_dir=str(tmp_path / "d"), output_dir=str(tmp_path / tag))
        return H.train(cfg, manifest, write=False)

    a, b = run("a"), run("b")
    same = json.dumps([a.folds, a.mean], sort_keys=True) == json.dumps([b.folds, b.mean], sort_keys=True)

    split_errors = []
    for n, seed in ((40, 0), (101, 3), (257, 9)):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        ids = [f"c{i:04d}" for i in range(n)]
        lab = dict(zip(ids, labels))
        splits = H.make_folds(_StubManifest(ids, labels), 5, seed)
        vals = [v for s in splits for v in s.val_ids]
        if sorted(vals) != sorted(ids) or len(vals) != len(set(vals)):
            split_errors.append((n, "partition"))
        for s in splits:
            if set(s.train_ids) & set(s.val_ids) or len(s.train_ids) + len(s.val_ids) != n:
                split_errors.append((n, s.fold_index, "train/val"))
            for cls in (0, 1):
                expected = (labels == cls).sum() * len(s.val_ids) / n
                got = sum(lab[i] == cls for i in s.val_ids)
                if abs(got - expected) > 1:
                    split_errors.append((n, s.fold_index, cls, got, expected))
    for s in H.make_folds(manifest, 5, 0):
        if s.val_ids != next(t for t in H.make_folds(manifest, 5, 0) if t.fold_index == s.fold_index).val_ids:
            split_errors.append("not reproducible")
    verdict(capsys, 8, "determinism and 5-fold splits", same and not split_errors,
            f"(identical reports {same}, split errors {split_errors[:3]})")


class _StubManifest:
    def __init__(self, ids, labels):
        self.cases = [type("Case", (), {"case_id": i, "label": int(l)})() for i, l in zip(ids, labels)]
        self.labels = np.asarray(labels)
