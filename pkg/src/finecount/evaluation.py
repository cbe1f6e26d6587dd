"""Dataset loading and per-subcategory-averaged counting metrics.

The metric is a two-level average: first the error over all images containing
a subcategory, then the unweighted mean across subcategories,

    Metric = (1/C) sum_c (1/|I_c|) sum_{i in I_c} E(y_i, yhat_i)

so a subcategory seen in one image counts as much as one seen in five
hundred. ABS gives MAE, SQ gives per-subcategory RMSE averaged across
subcategories (a pooled-global mode exists as a toggle), RELABS gives MRAE.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DatasetError, MetricError, MissingEmbeddingError

log = logging.getLogger(__name__)

# Reserved subcategory grouping infrequent classes; treated as a normal label.
OTHER_LABEL = "other"


@dataclass
class AnnotatedImage:
    id: str
    path: str
    parent: str
    labels: list[tuple[tuple[float, float], str]]  # ((x, y), subcategory)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, sub in self.labels:
            out[sub] = out.get(sub, 0) + 1
        return out


@dataclass
class EvalRecord:
    image_id: str
    subcategory: str
    y: float
    y_hat: float

    def __post_init__(self):
        self.y = float(self.y)
        self.y_hat = float(self.y_hat)
        if not (np.isfinite(self.y) and np.isfinite(self.y_hat)):
            raise MetricError(f"non-finite record for {self.image_id}/{self.subcategory}")
        if self.y < 0 or self.y_hat < 0:
            raise MetricError(f"negative count for {self.image_id}/{self.subcategory}")


@dataclass
class DatasetIssue:
    image_id: str
    problem: str


def scan_dataset(root) -> tuple[list[AnnotatedImage], list[DatasetIssue]]:
    """Read an annotated directory, collecting per-item problems.

    Layout: root/images/<id>.png + root/annotations.json mapping
    id -> {"parent": str, "points": [{"x": f, "y": f, "sub": str}, ...]}.
    """
    from PIL import Image

    ann_path = os.path.join(root, "annotations.json")
    if not os.path.isfile(ann_path):
        raise DatasetError(f"no annotations.json under {root}")
    try:
        with open(ann_path, encoding="utf-8") as f:
            annotations = json.load(f)
    except ValueError as exc:
        raise DatasetError(f"malformed annotations.json: {exc}") from exc
    if not annotations:
        log.warning("annotations.json under %s is empty", root)
        return [], []

    records: list[AnnotatedImage] = []
    issues: list[DatasetIssue] = []
    for image_id in sorted(annotations):
        entry = annotations[image_id]
        path = os.path.join(root, "images", image_id + ".png")
        if not os.path.isfile(path):
            issues.append(DatasetIssue(image_id, f"missing image file {path}"))
            continue
        try:
            with Image.open(path) as im:
                width, height = im.size
        except OSError as exc:
            issues.append(DatasetIssue(image_id, f"unreadable image: {exc}"))
            continue
        labels = []
        bad = None
        for point in entry.get("points", []):
            try:
                x, y, sub = float(point["x"]), float(point["y"]), str(point["sub"])
            except (KeyError, TypeError, ValueError) as exc:
                bad = f"malformed point {point!r}: {exc}"
                break
            if not sub.strip():
                bad = f"empty subcategory at ({x}, {y})"
                break
            if not (0 <= x < width and 0 <= y < height):
                bad = f"point ({x}, {y}) outside {width}x{height}"
                break
            labels.append(((x, y), sub))
        if bad:
            issues.append(DatasetIssue(image_id, bad))
            continue
        records.append(AnnotatedImage(
            id=image_id, path=path, parent=str(entry.get("parent", "")), labels=labels
        ))
    return records, issues


def load_dataset(root, strict: bool = True) -> list[AnnotatedImage]:
    """Strict mode aborts on the first bad item; lenient skips and reports."""
    records, issues = scan_dataset(root)
    if issues:
        detail = "; ".join(f"{i.image_id}: {i.problem}" for i in issues[:10])
        if strict:
            raise DatasetError(f"{len(issues)} bad dataset items: {detail}")
        log.warning("skipped %d bad dataset items: %s", len(issues), detail)
    return records


class ErrorFn(Enum):
    ABS = "abs"
    SQ = "sq"
    RELABS = "relabs"


def _group(records: list[EvalRecord]) -> dict[str, list[EvalRecord]]:
    by_sub: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_sub.setdefault(r.subcategory, []).append(r)
    return by_sub


def _relabs(y: float, y_hat: float, zero_mode: str) -> tuple[float, bool]:
    if y > 0:
        return abs(y - y_hat) / y, False
    if y_hat == 0:
        return 0.0, False
    if zero_mode == "strict":
        raise MetricError(
            f"relative error undefined: y=0, y_hat={y_hat} (use lenient mode)"
        )
    return abs(y - y_hat) / max(y, 1.0), True


def per_subcategory_errors(records, error_fn: ErrorFn,
                           relabs_zero: str = "strict") -> tuple[dict[str, float], int]:
    """Inner (per-subcategory) level of the metric; returns (errors, lenient substitutions)."""
    if not records:
        raise MetricError("no records to evaluate")
    substitutions = 0
    out: dict[str, float] = {}
    for sub, rs in _group(records).items():
        if error_fn is ErrorFn.ABS:
            out[sub] = float(np.mean([abs(r.y - r.y_hat) for r in rs]))
        elif error_fn is ErrorFn.SQ:
            out[sub] = float(np.sqrt(np.mean([(r.y - r.y_hat) ** 2 for r in rs])))
        else:
            errs = []
            for r in rs:
                e, subst = _relabs(r.y, r.y_hat, relabs_zero)
                errs.append(e)
                substitutions += int(subst)
            out[sub] = float(np.mean(errs))
    return out, substitutions


def metric(records: list[EvalRecord], error_fn: ErrorFn,
           relabs_zero: str = "strict", sq_scope: str = "subcategory") -> float:
    """Two-level averaged error; see the module docstring for the formula.

    sq_scope="global" pools all records into one RMSE instead of averaging
    per-subcategory RMSEs (the alternative reading for squared error).
    """
    if error_fn is ErrorFn.SQ and sq_scope == "global":
        if not records:
            raise MetricError("no records to evaluate")
        return float(np.sqrt(np.mean([(r.y - r.y_hat) ** 2 for r in records])))
    per_sub, _ = per_subcategory_errors(records, error_fn, relabs_zero)
    return float(np.mean(list(per_sub.values())))


def _summary(records, relabs_zero, sq_scope) -> dict:
    return {
        "mae": metric(records, ErrorFn.ABS),
        "rmse": metric(records, ErrorFn.SQ, sq_scope=sq_scope),
        "mrae": metric(records, ErrorFn.RELABS, relabs_zero=relabs_zero),
        "n_records": len(records),
        "n_subcategories": len({r.subcategory for r in records}),
    }


@dataclass
class Report:
    overall: dict
    per_parent: dict[str, dict]
    per_subcategory: dict[str, dict]
    skipped: list[str] = field(default_factory=list)
    baseline: dict | None = None
    deltas: dict | None = None
    relabs_substitutions: int = 0
    settings: dict = field(default_factory=dict)
    records: list[EvalRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = {
            "overall": self.overall,
            "per_parent": self.per_parent,
            "per_subcategory": self.per_subcategory,
            "skipped": self.skipped,
            "relabs_substitutions": self.relabs_substitutions,
            "settings": self.settings,
            "records": [
                {"image_id": r.image_id, "sub": r.subcategory, "y": r.y, "y_hat": r.y_hat}
                for r in self.records
            ],
        }
        if self.baseline is not None:
            doc["baseline"] = self.baseline
            doc["deltas"] = self.deltas
        return doc


def summarize_records(records: list[EvalRecord], baseline: list[EvalRecord] | None = None,
                      skipped: list[str] | None = None, relabs_zero: str = "lenient",
                      sq_scope: str = "subcategory") -> Report:
    """Aggregate eval records (and an optional baseline run) into a report."""
    overall = _summary(records, relabs_zero, sq_scope)
    per_sub = {}
    abs_err, _ = per_subcategory_errors(records, ErrorFn.ABS)
    sq_err, _ = per_subcategory_errors(records, ErrorFn.SQ)
    rel_err, n_subst = per_subcategory_errors(records, ErrorFn.RELABS, relabs_zero)
    for sub in sorted(abs_err):
        per_sub[sub] = {"mae": abs_err[sub], "rmse": sq_err[sub], "mrae": rel_err[sub],
                        "n_images": sum(1 for r in records if r.subcategory == sub)}
    report = Report(
        overall=overall,
        per_parent={},
        per_subcategory=per_sub,
        skipped=sorted(skipped or []),
        relabs_substitutions=n_subst,
        settings={"relabs_zero": relabs_zero, "sq_scope": sq_scope},
        records=sorted(records, key=lambda r: (r.image_id, r.subcategory)),
    )
    if baseline:
        report.baseline = _summary(baseline, relabs_zero, sq_scope)
        report.deltas = {
            k: report.overall[k] - report.baseline[k] for k in ("mae", "rmse", "mrae")
        }
    return report


def run_benchmark(dataset: list[AnnotatedImage], pipeline,
                  baseline_pipeline=None, relabs_zero: str = "lenient",
                  sq_scope: str = "subcategory",
                  parent_grouping: bool = True) -> Report:
    """Evaluate a counting pipeline over an annotated dataset.

    ``pipeline(image, subcategory, parent) -> predicted count`` is called for
    every subcategory annotated in every image. A MissingEmbeddingError skips
    that subcategory everywhere and lists it in the report. The reserved
    "other" label (the grouped infrequent classes) is never a counting target.
    """
    from PIL import Image

    records: list[EvalRecord] = []
    base_records: list[EvalRecord] = []
    parent_of: dict[str, str] = {}
    skipped: set[str] = set()
    for item in dataset:
        image = np.asarray(Image.open(item.path).convert("RGB"))
        for sub, y in sorted(item.counts().items()):
            if sub == OTHER_LABEL or sub in skipped:
                continue
            parent_of[sub] = item.parent
            try:
                y_hat = float(pipeline(image, sub, item.parent))
            except MissingEmbeddingError:
                skipped.add(sub)
                continue
            records.append(EvalRecord(item.id, sub, y, y_hat))
            if baseline_pipeline is not None:
                base_records.append(EvalRecord(
                    item.id, sub, y, float(baseline_pipeline(image, sub, item.parent))
                ))
    records = [r for r in records if r.subcategory not in skipped]
    base_records = [r for r in base_records if r.subcategory not in skipped]
    if not records:
        raise MetricError("benchmark produced no records (all subcategories skipped?)")
    report = summarize_records(records, base_records or None, sorted(skipped),
                               relabs_zero, sq_scope)
    if parent_grouping:
        for parent in sorted(set(parent_of.values())):
            subset = [r for r in records if parent_of[r.subcategory] == parent]
            if subset:
                report.per_parent[parent] = _summary(subset, relabs_zero, sq_scope)
    return report


def write_report(report: Report, out_dir, stem: str = "report",
                 sweep: list[tuple[int, float]] | None = None,
                 plots: bool = True) -> dict[str, str]:
    """Write report.json + report.md (+ PNG plots); returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    json_path = os.path.join(out_dir, stem + ".json")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    paths["json"] = json_path

    md_path = os.path.join(out_dir, stem + ".md")
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(render_markdown(report))
    paths["md"] = md_path

    if plots:
        bar_path = os.path.join(out_dir, stem + "_categories.png")
        plot_category_bars(report.per_subcategory, bar_path)
        paths["categories_plot"] = bar_path
        if sweep:
            sweep_path = os.path.join(out_dir, stem + "_sweep.png")
            plot_sweep(sweep, sweep_path)
            paths["sweep_plot"] = sweep_path
    return paths


def render_markdown(report: Report) -> str:
    lines = ["# Counting evaluation", ""]
    o = report.overall
    lines.append(f"Records: {o['n_records']} over {o['n_subcategories']} subcategories.")
    lines.append("")
    lines.append("| run | MAE | RMSE | MRAE |")
    lines.append("|---|---|---|---|")
    lines.append(f"| specialized | {o['mae']:.3f} | {o['rmse']:.3f} | {o['mrae']:.3f} |")
    if report.baseline:
        b = report.baseline
        lines.append(f"| baseline | {b['mae']:.3f} | {b['rmse']:.3f} | {b['mrae']:.3f} |")
        d = report.deltas
        lines.append(f"| delta | {d['mae']:+.3f} | {d['rmse']:+.3f} | {d['mrae']:+.3f} |")
    lines.append("")
    if report.per_parent:
        lines.append("## Per parent")
        lines.append("")
        lines.append("| parent | MAE | RMSE | MRAE | records |")
        lines.append("|---|---|---|---|---|")
        for parent, s in sorted(report.per_parent.items()):
            lines.append(f"| {parent} | {s['mae']:.3f} | {s['rmse']:.3f} "
                         f"| {s['mrae']:.3f} | {s['n_records']} |")
        lines.append("")
    lines.append("## Per subcategory")
    lines.append("")
    lines.append("| subcategory | MAE | RMSE | MRAE | images |")
    lines.append("|---|---|---|---|---|")
    for sub, s in sorted(report.per_subcategory.items()):
        lines.append(f"| {sub} | {s['mae']:.3f} | {s['rmse']:.3f} | {s['mrae']:.3f} "
                     f"| {s['n_images']} |")
    lines.append("")
    if report.skipped:
        lines.append(f"Skipped subcategories (no tuned embedding): "
                     f"{', '.join(report.skipped)}.")
        lines.append("")
    if report.relabs_substitutions:
        lines.append(f"Lenient MRAE substitutions (y=0): {report.relabs_substitutions}.")
        lines.append("")
    return "\n".join(lines)


def _agg_figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_sweep(points: list[tuple[int, float]], path) -> None:
    """Metric vs. synthetic-image-count curve."""
    plt = _agg_figure()
    xs, ys = zip(*sorted(points))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("synthetic pairs")
    ax.set_ylabel("MAE")
    ax.set_title("Specialization vs. synthetic data volume")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_category_bars(per_subcategory: dict[str, dict], path) -> None:
    plt = _agg_figure()
    subs = sorted(per_subcategory)
    maes = [per_subcategory[s]["mae"] for s in subs]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(subs)), 3.2))
    ax.bar(range(len(subs)), maes)
    ax.set_xticks(range(len(subs)))
    ax.set_xticklabels(subs, rotation=20, ha="right")
    ax.set_ylabel("MAE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
