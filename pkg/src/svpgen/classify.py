"""Residual-network classifiers and imbalance-robust evaluation.

Trains three-class particle classifiers on manifest splits, runs the full
optimizer/learning-rate/weight-decay/batch-size grid, and reduces score
records to the confusion-matrix metrics used throughout: per-class precision
(column-normalized diagonal), its unweighted macro average, and one-vs-rest
AUPRC averaged over classes.

Architecture presets (stage widths x block counts, all 3x3 stems, stride-2
stage transitions, global average pool, 3-way linear head):

    resnet18      BasicBlock,  64-128-256-512, blocks 2-2-2-2
    resnet50      Bottleneck,  64-128-256-512 (x4 expansion), blocks 3-4-6-3
    resnet8_tiny  BasicBlock,  16-32-64-128,   blocks 1-1-1-1
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, asdict
from itertools import product
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from svpgen import imageio
from svpgen.imageio import LABELS, DatasetManifest
from svpgen.seeds import derive_seed, rng_for

ARCHITECTURES = ("resnet18", "resnet50", "resnet8_tiny")

#: Full search grid: 2 optimizers x 7 learning rates x 3 weight decays x
#: 3 batch sizes = 126 configurations.
PAPER_GRID = {
    "optimizers": ("adam", "adamw"),
    "learning_rates": (1e-5, 5e-4, 1e-4, 5e-3, 1e-3, 5e-2, 1e-2),
    "weight_decays": (1e-5, 1e-4, 1e-3),
    "batch_sizes": (32, 64, 128),
}


class LeakageError(ValueError):
    """Raised when train and validation manifests share image paths."""


@dataclass(frozen=True)
class ClassifierConfig:
    architecture: str = "resnet18"
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class ScoreRecord:
    """Per-sample class scores with ground truth and source path."""

    scores: np.ndarray
    label: str
    path: str

    def __post_init__(self):
        if self.scores.shape != (len(LABELS),):
            raise ValueError(f"expected {len(LABELS)} scores, got shape {self.scores.shape}")
        if self.scores.min() < 0:
            raise ValueError("scores must be non-negative")
        if abs(float(self.scores.sum()) - 1.0) > 1e-6:
            raise ValueError(f"scores must sum to 1, got {self.scores.sum():.8f}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def predicted_index(self) -> int:
        return int(np.argmax(self.scores))  # ties resolve to the lowest class index

    @property
    def true_index(self) -> int:
        return LABELS.index(self.label)


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray
    precision_per_class: np.ndarray
    macro_precision: float
    auprc: float
    config: ClassifierConfig

    def csv_row(self) -> str:
        cells = [f"{p:.6f}" if np.isfinite(p) else "undefined" for p in self.precision_per_class]
        return ",".join(cells + [f"{self.macro_precision:.6f}", f"{self.auprc:.6f}"])

    def to_json(self) -> str:
        return json.dumps(
            {
                "confusion": self.confusion.tolist(),
                "class_order": list(LABELS),
                "precision_per_class": [
                    None if not np.isfinite(p) else float(p) for p in self.precision_per_class
                ],
                "macro_precision": self.macro_precision,
                "auprc": self.auprc,
                "config": asdict(self.config),
            },
            indent=2,
            sort_keys=True,
        )


# ---------------------------------------------------------------------------
# Residual networks
# ---------------------------------------------------------------------------


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv3 = nn.Conv2d(out_ch, out_ch * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch * self.expansion)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch * self.expansion:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch * self.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch * self.expansion),
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return F.relu(h + self.shortcut(x))


class ResNet(nn.Module):
    def __init__(self, block, blocks_per_stage, stage_widths, num_classes=3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, stage_widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(stage_widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = stage_widths[0]
        for i, (n_blocks, width) in enumerate(zip(blocks_per_stage, stage_widths)):
            for j in range(n_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                stages.append(block(in_ch, width, stride))
                in_ch = width * block.expansion
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.head(h.mean(dim=(2, 3)))


_PRESETS = {
    "resnet18": (BasicBlock, (2, 2, 2, 2), (64, 128, 256, 512)),
    "resnet50": (Bottleneck, (3, 4, 6, 3), (64, 128, 256, 512)),
    "resnet8_tiny": (BasicBlock, (1, 1, 1, 1), (16, 32, 64, 128)),
}


def build_classifier(architecture: str, seed: int = 0, num_classes: int = 3) -> ResNet:
    """Construct a preset classifier with deterministically seeded weights."""
    block, blocks, widths = _PRESETS[architecture]
    torch.manual_seed(seed)
    return ResNet(block, blocks, widths, num_classes)


def classifier_forward(net: ResNet, images) -> np.ndarray:
    """Softmax class scores for a standardized unit-range batch, (N, 3)."""
    data = images.data if isinstance(images, imageio.ImageTensor) else np.asarray(images)
    net.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(data * 2.0 - 1.0, dtype=np.float32))
        return torch.softmax(net(x), dim=1).double().numpy()


def score_records(net: ResNet, manifest: DatasetManifest, batch_size: int = 256) -> list[ScoreRecord]:
    """Run the classifier over a manifest and attach paths and ground truth."""
    records = []
    recs = manifest.records
    for lo in range(0, len(recs), batch_size):
        chunk = recs[lo : lo + batch_size]
        images = imageio.load_standardized([r.path for r in chunk])
        scores = classifier_forward(net, images)
        records.extend(
            ScoreRecord(scores=s, label=r.label, path=r.path) for s, r in zip(scores, chunk)
        )
    return records


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(records: list[ScoreRecord]) -> np.ndarray:
    """3x3 counts, true class as row and argmax prediction as column."""
    if not records:
        raise ValueError("no records to score")
    mat = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    for rec in records:
        mat[rec.true_index, rec.predicted_index] += 1
    return mat


def precision_per_class(confusion: np.ndarray) -> np.ndarray:
    """Column-normalized diagonal: C_ii / sum_j C_ji; NaN flags empty columns."""
    confusion = np.asarray(confusion)
    column_sums = confusion.sum(axis=0)
    out = np.full(len(LABELS), np.nan)
    for i, label in enumerate(LABELS):
        if column_sums[i] == 0:
            warnings.warn(f"no predictions for class {label}; precision undefined", stacklevel=2)
        else:
            out[i] = confusion[i, i] / column_sums[i]
    return out


def macro_precision(precisions) -> float:
    """Unweighted mean of the per-class precisions; all must be defined."""
    arr = np.asarray(precisions, dtype=np.float64)
    if arr.shape != (len(LABELS),):
        raise ValueError(f"expected {len(LABELS)} per-class values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("macro precision undefined: some class has no predictions")
    return float(arr.mean())


def _macro_defined(precisions: np.ndarray) -> float:
    """Macro average over the defined classes only (warned upstream)."""
    defined = precisions[np.isfinite(precisions)]
    return float(defined.mean()) if defined.size else float("nan")


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Binary AP by the step rule sum_k (R_k - R_{k-1}) P_k over descending
    unique score thresholds (rectangular, no interpolation)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    total = int(positives.sum())
    if total == 0:
        raise ValueError("average precision undefined without positive samples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(positives[order])
    predicted = np.arange(1, len(scores) + 1)
    # Last index of each unique-score block = the threshold set at that score.
    block_end = np.append(np.nonzero(np.diff(sorted_scores))[0], len(scores) - 1)
    precision = tp[block_end] / predicted[block_end]
    recall = tp[block_end] / total
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def auprc(records: list[ScoreRecord]) -> float:
    """Mean one-vs-rest average precision over the three classes."""
    scores = np.stack([rec.scores for rec in records])
    truth = np.array([rec.true_index for rec in records])
    per_class = [average_precision(scores[:, i], truth == i) for i in range(len(LABELS))]
    return float(np.mean(per_class))


def report_from_records(records: list[ScoreRecord], config: ClassifierConfig) -> EvalReport:
    confusion = confusion_matrix(records)
    precisions = precision_per_class(confusion)
    return EvalReport(
        confusion=confusion,
        precision_per_class=precisions,
        macro_precision=_macro_defined(precisions),
        auprc=auprc(records),
        config=config,
    )


def report_from_json(text: str) -> EvalReport:
    """Inverse of :meth:`EvalReport.to_json`."""
    payload = json.loads(text)
    return EvalReport(
        confusion=np.asarray(payload["confusion"], dtype=np.int64),
        precision_per_class=np.array(
            [np.nan if p is None else p for p in payload["precision_per_class"]]
        ),
        macro_precision=payload["macro_precision"],
        auprc=payload["auprc"],
        config=ClassifierConfig(**payload["config"]),
    )


# ---------------------------------------------------------------------------
# Training and grid search
# ---------------------------------------------------------------------------


def check_disjoint(train: DatasetManifest, val: DatasetManifest) -> None:
    overlap = set(train.paths()) & set(val.paths())
    if overlap:
        sample = sorted(overlap)[:3]
        raise LeakageError(
            f"train and validation share {len(overlap)} paths (e.g. {sample}); refusing to train"
        )


def train_classifier(
    cfg: ClassifierConfig,
    train: DatasetManifest,
    val: DatasetManifest,
) -> tuple[ResNet, EvalReport]:
    """Cross-entropy training with best-epoch selection on validation macro precision."""
    check_disjoint(train, val)
    net = build_classifier(cfg.architecture, seed=cfg.seed)
    opt_cls = torch.optim.Adam if cfg.optimizer == "adam" else torch.optim.AdamW
    optimizer = opt_cls(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    images = imageio.load_standardized(train.paths()).data * 2.0 - 1.0
    labels = np.array([LABELS.index(r.label) for r in train.records], dtype=np.int64)
    x_all = torch.from_numpy(images.astype(np.float32))
    y_all = torch.from_numpy(labels)

    best_state = None
    best_macro = -np.inf
    rng = rng_for(cfg.seed, "shuffle")
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(train))
        for lo in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[lo : lo + cfg.batch_size].copy())
            if idx.numel() < 2:
                continue  # batch norm cannot standardize a single sample
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
            loss.backward()
            optimizer.step()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            epoch_report = report_from_records(score_records(net, val), cfg)
        if np.isfinite(epoch_report.macro_precision) and epoch_report.macro_precision > best_macro:
            best_macro = epoch_report.macro_precision
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    if best_state is not None:
        net.load_state_dict(best_state)
    return net, report_from_records(score_records(net, val), cfg)


def grid_search(
    architecture: str,
    optimizers,
    learning_rates,
    weight_decays,
    batch_sizes,
    train: DatasetManifest,
    val: DatasetManifest,
    epochs: int = 30,
    seed: int = 0,
) -> list[EvalReport]:
    """Exhaustive Cartesian sweep; reports sorted by macro precision, best first.

    Each run gets an isolated seed derived from its coordinates so results do
    not depend on execution order.
    """
    reports = []
    for opt, lr, wd, batch in product(optimizers, learning_rates, weight_decays, batch_sizes):
        cfg = ClassifierConfig(
            architecture=architecture,
            optimizer=opt,
            learning_rate=lr,
            weight_decay=wd,
            batch_size=batch,
            epochs=epochs,
            seed=derive_seed(seed, architecture, opt, repr(lr), repr(wd), batch),
        )
        _, report = train_classifier(cfg, train, val)
        reports.append(report)
    key = lambda r: (r.macro_precision if np.isfinite(r.macro_precision) else -np.inf)
    return sorted(reports, key=key, reverse=True)


def grid_size(grid: dict) -> int:
    return (
        len(grid["optimizers"])
        * len(grid["learning_rates"])
        * len(grid["weight_decays"])
        * len(grid["batch_sizes"])
    )


def write_grid_csv(reports: list[EvalReport], path) -> None:
    """grid_results.csv: one row per configuration, sorted as given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["architecture", "optimizer", "learning_rate", "weight_decay", "batch_size"]
            + list(LABELS)
            + ["macro_precision", "auprc"]
        )
        for r in reports:
            writer.writerow(
                [
                    r.config.architecture,
                    r.config.optimizer,
                    r.config.learning_rate,
                    r.config.weight_decay,
                    r.config.batch_size,
                ]
                + [f"{p:.6f}" if np.isfinite(p) else "undefined" for p in r.precision_per_class]
                + [f"{r.macro_precision:.6f}", f"{r.auprc:.6f}"]
            )


def write_comparison_csv(rows: dict[str, EvalReport], path) -> None:
    """Side-by-side split comparison shaped like the published results table:
    one row per training split, metric columns in canonical order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "training_dataset"] + list(LABELS) + ["macro_precision", "auprc"]
        )
        for split_name, r in rows.items():
            writer.writerow(
                [r.config.architecture, split_name]
                + [f"{p:.6f}" if np.isfinite(p) else "undefined" for p in r.precision_per_class]
                + [f"{r.macro_precision:.6f}", f"{r.auprc:.6f}"]
            )


def export_misclassified(
    records: list[ScoreRecord],
    out_dir,
    top_k: int = 5,
    confusion: np.ndarray | None = None,
) -> list[Path]:
    """Export the most confident misclassifications per (true, predicted) pair.

    Writes standardized PNG copies plus an index CSV (path,true,pred,score)
    sorted by confidence within each off-diagonal cell. Returns written PNGs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if confusion is not None and not np.array_equal(confusion, confusion_matrix(records)):
        raise ValueError("given confusion matrix does not match the score records")
    cells: dict[tuple[int, int], list[ScoreRecord]] = {}
    for rec in records:
        if rec.predicted_index != rec.true_index:
            cells.setdefault((rec.true_index, rec.predicted_index), []).append(rec)

    written = []
    index_rows = []
    for (ti, pi), cell in sorted(cells.items()):
        cell.sort(key=lambda r: -float(r.scores[r.predicted_index]))
        for rank, rec in enumerate(cell[:top_k]):
            name = f"{LABELS[ti]}_as_{LABELS[pi]}_{rank:02d}.png"
            dest = out_dir / name
            imageio.save_png(imageio.standardize(imageio.load_image(rec.path)).data[0], dest)
            written.append(dest)
            index_rows.append((str(dest), LABELS[ti], LABELS[pi], float(rec.scores[pi])))

    with open(out_dir / "index.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "true", "pred", "score"])
        for row in index_rows:
            writer.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])
    return written
