"""
Ablation harness: train and evaluate model variants under a shared seed and
dataset, and render the results in the per-class AP table layout.
"""
import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .checkpoint import save_checkpoint
from .data import DetectionDataset
from .detector import ModelConfig, build_model
from .evaluation import EvalResult, EvalThresholds, evaluate
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

COLUMNS = ("Echinus", "Starfish", "Holoth.", "Scallop", "Waterweed", "mAP")

_NO_FLAGS = dict(use_residual=False, use_channel_attention=False, use_residual_attention=False,
                 use_multi_scale_attention=False, use_domain=False)


def _flags(**on):
    d = dict(_NO_FLAGS)
    d.update(on)
    return d


VARIANTS_NO_DOMAIN = (
    ("Baseline (YOLOv3)", _flags()),
    ("+Residual", _flags(use_residual=True)),
    ("+Channel Attention", _flags(use_channel_attention=True)),
    ("+Residual Attention", _flags(use_residual_attention=True)),
    ("+Multi-Scale Attention", _flags(use_multi_scale_attention=True)),
    ("+Residual+Multi-Scale Attention", _flags(use_residual=True, use_multi_scale_attention=True)),
    ("+Channel Attention+Multi-Scale Attention", _flags(use_channel_attention=True, use_multi_scale_attention=True)),
    ("+Residual+Channel Attention+Multi-Scale Attention",
     _flags(use_residual=True, use_channel_attention=True, use_multi_scale_attention=True)),
)

VARIANTS_DOMAIN = (
    ("Baseline (YOLOv3)", _flags()),
    ("+Domain", _flags(use_domain=True)),
    ("+Domain +Residual", _flags(use_domain=True, use_residual=True)),
    ("+Domain +Channel Attention", _flags(use_domain=True, use_channel_attention=True)),
    ("+Domain +Residual Attention", _flags(use_domain=True, use_residual_attention=True)),
    ("+Domain +Multi-Scale Attention", _flags(use_domain=True, use_multi_scale_attention=True)),
    ("+Domain +Residual+Multi-Scale Attention",
     _flags(use_domain=True, use_residual=True, use_multi_scale_attention=True)),
    ("+Domain +Channel Attention+Multi-Scale Attention",
     _flags(use_domain=True, use_channel_attention=True, use_multi_scale_attention=True)),
    ("+Domain +Residual+Channel Attention+Multi-Scale Attention",
     _flags(use_domain=True, use_residual=True, use_channel_attention=True, use_multi_scale_attention=True)),
)

ALL_VARIANTS = dict(VARIANTS_NO_DOMAIN + VARIANTS_DOMAIN)

TABLE_TITLES = {
    ("original", "off"): "Results on original data without domain",
    ("augmented", "off"): "Results on augmented data without domain",
    ("original", "on"): "Results on original data with domain",
    ("augmented", "on"): "Results on augmented data with domain",
}

FULL_MATRIX = (("original", "off"), ("augmented", "off"), ("original", "on"), ("augmented", "on"))


def default_variants(domain_mode):
    return VARIANTS_DOMAIN if domain_mode == "on" else VARIANTS_NO_DOMAIN


@dataclass
class AblationSpec:
    variants: Sequence[Tuple[str, dict]]
    dataset_mode: str = "original"
    domain_mode: str = "off"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    thresholds: EvalThresholds = field(default_factory=EvalThresholds)
    seed: int = 0

    def __post_init__(self):
        labels = [v[0] for v in self.variants]
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        if dupes:
            raise ValueError(f"duplicate variant labels: {dupes}")
        if self.dataset_mode not in ("original", "augmented"):
            raise ValueError(f"dataset_mode must be original or augmented, got {self.dataset_mode!r}")
        if self.domain_mode not in ("off", "on"):
            raise ValueError(f"domain_mode must be off or on, got {self.domain_mode!r}")

    @property
    def title(self):
        return TABLE_TITLES[(self.dataset_mode, self.domain_mode)]

    @property
    def slug(self):
        return f"{self.dataset_mode}_domain-{self.domain_mode}"


@dataclass
class TableRow:
    label: str
    result: Optional[EvalResult] = None
    error: Optional[str] = None

    def values(self):
        """AP x 100 per column, rounded to the printed 2 decimals."""
        if self.result is None:
            return None
        aps = list(self.result.per_class_ap.values()) + [self.result.map]
        return [round(100 * v, 2) for v in aps]


@dataclass
class ResultsTable:
    title: str
    rows: List[TableRow]
    columns: Tuple[str, ...] = COLUMNS
    notes: str = ""

    def column_maxima(self):
        vals = [r.values() for r in self.rows if r.values() is not None]
        if not vals:
            return [None] * len(self.columns)
        return [max(v[c] for v in vals) for c in range(len(self.columns))]

    def bold_mask(self):
        maxima = self.column_maxima()
        mask = []
        for r in self.rows:
            v = r.values()
            mask.append([v is not None and v[c] == maxima[c] for c in range(len(self.columns))])
        return mask

    def to_markdown(self):
        out = io.StringIO()
        out.write(f"**{self.title}**\n\n")
        if self.notes:
            out.write(f"{self.notes}\n\n")
        out.write("| Model | " + " | ".join(self.columns) + " |\n")
        out.write("|---|" + "---|" * len(self.columns) + "\n")
        for row, bold in zip(self.rows, self.bold_mask()):
            v = row.values()
            if v is None:
                cells = [f"failed: {row.error}"] + [""] * (len(self.columns) - 1)
            else:
                cells = [f"**{x:.2f}**" if b else f"{x:.2f}" for x, b in zip(v, bold)]
            out.write(f"| {row.label} | " + " | ".join(cells) + " |\n")
        return out.getvalue()

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["Model", *self.columns, "bold", "status"])
        for row, bold in zip(self.rows, self.bold_mask()):
            v = row.values()
            if v is None:
                w.writerow([row.label, *[""] * len(self.columns), "", f"failed: {row.error}"])
            else:
                marks = ";".join(c for c, b in zip(self.columns, bold) if b)
                w.writerow([row.label, *[f"{x:.2f}" for x in v], marks, "ok"])
        return out.getvalue()


def parse_markdown_table(text):
    """Rows of (label, values, bold flags) from :meth:`ResultsTable.to_markdown` output."""
    rows = []
    for line in text.splitlines():
        if not line.startswith("| ") or line.startswith("| Model"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        label, rest = cells[0], cells[1:]
        if rest and rest[0].startswith("failed"):
            rows.append((label, None, None))
            continue
        bold = [c.startswith("**") for c in rest]
        vals = [float(c.strip("*")) for c in rest]
        rows.append((label, vals, bold))
    return rows


def variant_slug(label):
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower() or "variant"


def run_ablation(spec: AblationSpec, train_manifest, val_manifest, out_dir=None) -> ResultsTable:
    """Train + evaluate every variant on the same data and seed.

    A variant that fails is recorded as a failed row; the run continues.
    """
    input_size = spec.model.input_size
    train_ds = DetectionDataset(train_manifest, input_size)
    val_ds = DetectionDataset(val_manifest, input_size)
    base = Path(out_dir) / spec.slug if out_dir is not None else None
    rows = []
    for label, flags in spec.variants:
        try:
            cfg = replace(spec.model, **flags).validate()
            model = build_model(cfg, spec.seed)
            vdir = base / variant_slug(label) if base is not None else None
            model, history = fit(model, train_ds, replace(spec.train, seed=spec.seed), out_dir=vdir)
            result = evaluate(model, val_ds, spec.thresholds)
            if vdir is not None:
                (vdir / "eval.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
                with open(vdir / "detections.jsonl", "w") as f:
                    for rec in result.records:
                        f.write(json.dumps(rec, sort_keys=True) + "\n")
            rows.append(TableRow(label, result))
        except Exception as e:  # a failed variant must not abort the table
            log.exception("variant %r failed", label)
            rows.append(TableRow(label, None, f"{type(e).__name__}: {e}"))
    notes = (f"dataset={spec.dataset_mode}, domain={spec.domain_mode}, "
             f"domain training={'adversarial' if spec.train.adversarial else 'cooperative'}, "
             f"AP={spec.thresholds.interpolation} @ IoU {spec.thresholds.match_iou}")
    table = ResultsTable(spec.title, rows, notes=notes)
    if base is not None:
        base.mkdir(parents=True, exist_ok=True)
        (base / "table.md").write_text(table.to_markdown())
        (base / "table.csv").write_text(table.to_csv())
    return table
