"""Cross-dataset benchmark runner and table rendering."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .dataset import DatasetManifest
from .metrics import MetricReport, evaluate
from .preprocess import PreprocessConfig, load_and_preprocess

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("Dataset", "WAR", "Top-2 Acc", "Precision", "F1")

# Published full-scale results (1B backbone); printed for comparison, never computed here.
REFERENCE_ROWS = {
    "jaffe": (58.57, 76.19, 75.25, 56.20),
    "ckplus": (80.00, 96.67, 70.77, 76.15),
    "fer2013": (53.87, 74.80, 49.59, 49.13),
    "affectnet": (62.52, 83.50, 62.63, 62.41),
}
# Published WAR of other cross-domain methods (source RAF-DB); static reference rows.
COMPARISON_WAR = {
    "ECAN (ResNet50)": {"jaffe": 57.28, "ckplus": 79.77, "fer2013": 56.46, "affectnet": 51.84},
    "AGRA (ResNet50)": {"jaffe": 61.50, "ckplus": 85.27, "fer2013": 58.95},
    "CSRL (ResNet18)": {"jaffe": 66.67, "ckplus": 88.37, "fer2013": 55.53},
}
SOURCE_DOMAIN = "affectnet"
DISPLAY_NAMES = {"jaffe": "JAFFE", "ckplus": "CK+", "fer2013": "FER-2013", "affectnet": "AffectNet"}


@dataclass
class BenchRow:
    dataset: str
    report: MetricReport | None = None
    error: str | None = None

    @property
    def domain(self) -> str:
        return "source domain" if self.dataset == SOURCE_DOMAIN else "cross-domain"

    def to_record(self) -> dict:
        rec = {"dataset": self.dataset, "domain": self.domain, "error": self.error}
        if self.report is not None:
            rec["report"] = self.report.to_record()
        return rec


Adapter = Callable[[], DatasetManifest]


@torch.no_grad()
def run_model(model: Callable[[torch.Tensor], torch.Tensor], manifest: DatasetManifest,
              preprocess_cfg: PreprocessConfig, batch_size: int = 16) -> torch.Tensor:
    if isinstance(model, torch.nn.Module):
        model.eval()
    out = []
    samples = manifest.samples
    for i in range(0, len(samples), batch_size):
        batch = torch.stack([load_and_preprocess(s, preprocess_cfg) for s in samples[i : i + batch_size]])
        if isinstance(model, torch.nn.Module):
            batch = batch.to(next(model.parameters()).dtype)
        out.append(model(batch).double())
    return torch.cat(out)


def benchmark(model, adapters: dict[str, Adapter] | Sequence[tuple[str, Adapter]],
              preprocess_cfg: PreprocessConfig = PreprocessConfig(), batch_size: int = 16) -> list[BenchRow]:
    """Evaluate ``model`` on every dataset; a failing dataset yields an error row."""
    rows = []
    items = adapters.items() if isinstance(adapters, dict) else adapters
    for name, adapter in items:
        try:
            manifest = adapter()
            if len(manifest) == 0:
                raise ValueError("dataset is empty")
            logits = run_model(model, manifest, preprocess_cfg, batch_size)
            rows.append(BenchRow(name, evaluate(logits.numpy(), manifest.labels(), name)))
        except Exception as e:  # one dataset must not abort the others
            log.warning("benchmark on %s failed: %s", name, e)
            rows.append(BenchRow(name, error=f"{type(e).__name__}: {e}"))
    return rows


def _fmt_row(cells: Sequence[str], widths: Sequence[int]) -> str:
    return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"


def render_table(rows: Sequence[BenchRow], include_reference: bool = True) -> str:
    """Plain-text table: Dataset | WAR | Top-2 Acc | Precision | F1."""
    body = []
    for r in rows:
        name = DISPLAY_NAMES.get(r.dataset, r.dataset)
        if r.dataset == SOURCE_DOMAIN:
            name += " (source domain)"
        if r.report is None:
            body.append([name, "error", "-", "-", "-"])
        else:
            rep = r.report
            body.append([name] + [f"{v:.2f}" for v in
                                  (rep.war, rep.top_k_acc.get(2, float("nan")), rep.precision_macro, rep.f1_macro)])
    if include_reference:
        for key in (r.dataset for r in rows):
            if key in REFERENCE_ROWS:
                body.append([f"{DISPLAY_NAMES[key]} [reference, full scale]"]
                            + [f"{v:.2f}" for v in REFERENCE_ROWS[key]])
    widths = [max(len(c) for c in col) for col in zip(TABLE_COLUMNS, *body)]
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    lines = [_fmt_row(TABLE_COLUMNS, widths), sep] + [_fmt_row(b, widths) for b in body]
    errors = [f"  {r.dataset}: {r.error}" for r in rows if r.error]
    if errors:
        lines += ["", "errors:"] + errors
    return "\n".join(lines)


def render_comparison(rows: Sequence[BenchRow]) -> str:
    """WAR per dataset next to the published reference methods (labelled, not computed)."""
    keys = [r.dataset for r in rows]
    header = ["Method"] + [DISPLAY_NAMES.get(k, k) for k in keys]
    body = [[f"{m} [reference]"] + [f"{vals[k]:.2f}" if k in vals else "--" for k in keys]
            for m, vals in COMPARISON_WAR.items()]
    body.append(["this model"] + [f"{r.report.war:.2f}" if r.report else "error" for r in rows])
    widths = [max(len(c) for c in col) for col in zip(header, *body)]
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([_fmt_row(header, widths), sep] + [_fmt_row(b, widths) for b in body])


def write_reports(rows: Sequence[BenchRow], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in rows))
