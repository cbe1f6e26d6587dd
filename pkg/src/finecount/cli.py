"""Command-line orchestration of the synthesize -> tune -> count -> eval lifecycle.

Runs are driven by a single YAML (or JSON) config file; flags override config
keys. Every artifact embeds the config hash, so a stored config plus seed
reproduces a run bit for bit with deterministic backends, and --resume
no-ops stages whose artifacts already match the current config.

Exit codes: 0 success, 1 pipeline failure, 2 config/usage error,
3 retriable external-service failure.
"""

from __future__ import annotations

import argparse
import datetime
import glob
import hashlib
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import counting, evaluation
from .errors import (
    DatasetError,
    FinecountError,
    InvalidSpecError,
    MissingEmbeddingError,
    SuggesterTransportError,
    SynthesisError,
    TuningError,
)
from .specializer import (
    BilinearToySegmenter,
    TuningConfig,
    load_concept,
    save_concept,
    tune,
    write_history_csv,
)
from .synthesis import (
    GeneratorCapabilities,
    MockShapesGenerator,
    category_slug,
    load_pairs,
    persist_pairs,
    synthesize_dataset,
)
from .synthesis import wire
from .taxonomy import (
    CategorySpec,
    HttpSuggester,
    NegativeSource,
    StaticSuggester,
    expand_prompts,
    source_negatives,
)

log = logging.getLogger("finecount")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_RETRIABLE = 3

DEFAULT_OUT = "finecount_out"


# ---------------------------------------------------------------- config

def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        config = yaml.safe_load(f)
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise InvalidSpecError(f"config must be a mapping, got {type(config).__name__}")
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def artifact_hash(doc) -> str:
    """Hash of a JSON artifact with timestamp fields excluded.

    Two artifacts from identical config+seed runs hash identically even
    though their created_at stamps differ.
    """
    if not isinstance(doc, dict):
        with open(doc, encoding="utf-8") as f:
            doc = json.load(f)
    stripped = {k: v for k, v in doc.items() if k != "created_at"}
    return hashlib.sha256(
        json.dumps(stripped, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _apply_overrides(config: dict, args) -> dict:
    config = dict(config)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "out", None):
        config["out"] = args.out
    if getattr(args, "jobs", None):
        config["jobs"] = args.jobs
    if getattr(args, "strict", False):
        config["strict"] = True
    config.setdefault("seed", 0)
    config.setdefault("out", DEFAULT_OUT)
    config.setdefault("jobs", 1)
    return config


def _category_specs(config) -> list[CategorySpec]:
    raw = config.get("categories")
    if raw is None and "category" in config:
        raw = [config["category"]]
    if not raw:
        raise InvalidSpecError("config needs a 'category' or 'categories' section")
    return [CategorySpec.from_json(entry) for entry in raw]


# ---------------------------------------------------------------- backends

def build_generator(config):
    section = config.get("generator") or {}
    kind = section.get("kind", "mock_shapes")
    options = section.get("options") or {}
    if kind == "mock_shapes":
        return MockShapesGenerator(**options)
    if kind in ("remote_tcp", "worker"):
        caps = GeneratorCapabilities(
            image_size=options["image_size"],
            steps=options.get("steps", 0),
            captured_blocks=tuple(options.get("captured_blocks", ())),
            attention_blocks=(tuple(options["attention_blocks"])
                              if options.get("attention_blocks") else None),
            concurrent_safe=bool(options.get("concurrent_safe", False)),
        )
        if kind == "remote_tcp":
            return wire.connect_tcp(section["host"], int(section["port"]), caps)
        return wire.spawn_worker(list(section["argv"]), caps)
    raise InvalidSpecError(f"unknown generator kind {kind!r}")


def build_segmenter(config):
    section = config.get("segmenter") or {}
    kind = section.get("kind", "toy_bilinear")
    options = section.get("options") or {}
    if kind == "toy_bilinear":
        return BilinearToySegmenter(**options)
    raise InvalidSpecError(f"unknown segmenter kind {kind!r}")


def build_counter(config):
    section = config.get("counter") or {}
    kind = section.get("kind", "centroid_points")
    options = section.get("options") or {}
    if kind == "centroid_points":
        return counting.CentroidCounter(**options)
    if kind == "blob_density":
        return counting.BlobDensityCounter(**options)
    raise InvalidSpecError(f"unknown counter kind {kind!r}")


def build_suggester(config):
    section = config.get("suggester") or {}
    kind = section.get("kind", "static")
    if kind == "static":
        return StaticSuggester(section.get("responses") or {})
    if kind == "http":
        # Token comes from the environment only; it must never reach artifacts.
        return HttpSuggester(url=section.get("url"),
                             timeout=float(section.get("timeout", 30.0)))
    raise InvalidSpecError(f"unknown suggester kind {kind!r}")


# ---------------------------------------------------------------- commands

def _resolved_specs(config) -> list[CategorySpec]:
    """Category specs with negatives populated per their sourcing strategy."""
    specs = _category_specs(config)
    needs_llm = any(s.negative_source is NegativeSource.LLM_GENERATED for s in specs)
    suggester = build_suggester(config) if needs_llm else None
    k = int((config.get("synthesis") or {}).get("k_negatives", 5))
    return [source_negatives(spec, k=k, llm=suggester) for spec in specs]


def _load_resolved_specs(config) -> list[CategorySpec]:
    """Prefer specs persisted by cmd_synth (their negatives are already sourced)."""
    spec_dir = os.path.join(config["out"], "specs")
    specs = _category_specs(config)
    resolved = []
    for spec in specs:
        path = os.path.join(spec_dir, category_slug(spec.name) + ".json")
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as f:
                resolved.append(CategorySpec.from_json(json.load(f)))
        else:
            resolved.append(spec)
    return resolved


def cmd_synth(config, args) -> int:
    out = config["out"]
    manifest_path = os.path.join(out, "synth_manifest.json")
    chash = config_hash(config)
    if getattr(args, "resume", False) and os.path.isfile(manifest_path):
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
        if manifest.get("config_hash") == chash:
            log.info("[synth] artifacts match config hash %s; nothing to do", chash[:12])
            return EXIT_OK

    specs = _resolved_specs(config)
    generator = build_generator(config)
    synth_cfg = config.get("synthesis") or {}
    n_pos = int(synth_cfg.get("n_pos", 100))
    n_neg = int(synth_cfg.get("n_neg_total", 100))
    tau = float(synth_cfg.get("tau", 0.1))
    n_prompts = int(synth_cfg.get("n_prompts", max(n_pos, n_neg, 1)))
    seed = int(config["seed"])

    os.makedirs(os.path.join(out, "specs"), exist_ok=True)
    all_pairs = []
    summary = {}
    for spec in specs:
        bundle = expand_prompts(spec, n_prompts, seed)
        requested = n_pos + (n_neg if spec.negatives else 0)
        pairs = synthesize_dataset(
            spec, bundle, generator,
            n_pos=n_pos, n_neg_total=n_neg if spec.negatives else 0,
            seed=seed, tau=tau, jobs=int(config.get("jobs", 1)),
        )
        n_p = sum(1 for p in pairs if p.polarity.value == "positive")
        n_n = len(pairs) - n_p
        failures = requested - len(pairs)
        summary[spec.name] = {"positive": n_p, "negative": n_n, "failures": failures}
        log.info("[synth] %s: %d positive, %d negative pairs (%d failures)",
                 spec.name, n_p, n_n, failures)
        all_pairs.extend(pairs)
        spec_path = os.path.join(out, "specs", category_slug(spec.name) + ".json")
        with open(spec_path, "w", encoding="utf-8") as f:
            json.dump(spec.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    persist_pairs(all_pairs, out)
    manifest = {"config_hash": chash, "created_at": _now(), "categories": summary}
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return EXIT_OK


def _pairs_for(spec: CategorySpec, pairs):
    negatives = set(spec.negatives)
    keep = []
    for p in pairs:
        if p.polarity.value == "positive" and p.category == spec.name:
            keep.append(p)
        elif p.polarity.value == "negative" and p.category in negatives:
            keep.append(p)
    return keep


def cmd_tune(config, args) -> int:
    out = config["out"]
    chash = config_hash(config)
    try:
        pairs = load_pairs(out)
    except SynthesisError as exc:
        raise TuningError(
            f"{exc}; run `finecount synth` for this config first"
        ) from exc

    specs = _load_resolved_specs(config)
    segmenter = build_segmenter(config)
    tuning_options = dict(config.get("tuning") or {})
    tuning_options.setdefault("seed", int(config["seed"]))
    concept_dir = os.path.join(out, "concepts")
    os.makedirs(concept_dir, exist_ok=True)

    for spec in specs:
        slug = category_slug(spec.name)
        concept_path = os.path.join(concept_dir, slug + ".json")
        if getattr(args, "resume", False) and os.path.isfile(concept_path):
            with open(concept_path, encoding="utf-8") as f:
                existing = json.load(f)
            if existing.get("config_hash") == chash:
                log.info("[tune] %s: concept up to date", spec.name)
                continue
        subset = _pairs_for(spec, pairs)
        if not any(p.polarity.value == "positive" for p in subset):
            raise TuningError(
                f"no synthesized positives for {spec.name!r} under {out}; "
                f"run `finecount synth` for this config first"
            )
        cfg = TuningConfig(**tuning_options)
        concept = tune(spec, subset, segmenter, cfg)
        save_concept(concept, concept_path,
                     extra={"config_hash": chash, "created_at": _now()})
        write_history_csv(concept.history, os.path.join(concept_dir, slug + "_history.csv"))
        record = concept.history[concept.selected_epoch]
        log.info("[tune] %s: %d pairs, selected epoch %d (val loss %.4f)",
                 spec.name, len(subset), concept.selected_epoch, record.val_loss)
    return EXIT_OK


def _load_concept_for(out, name):
    path = os.path.join(out, "concepts", category_slug(name) + ".json")
    if not os.path.isfile(path):
        raise MissingEmbeddingError(
            f"no tuned concept for {name!r} (expected {path}); run `finecount tune`"
        )
    return load_concept(path)


def _image_files(target) -> list[str]:
    if os.path.isfile(target):
        return [target]
    if os.path.isdir(target):
        files = []
        for ext in ("png", "jpg", "jpeg"):
            files.extend(glob.glob(os.path.join(target, f"*.{ext}")))
        return sorted(files)
    raise InvalidSpecError(f"no image file or directory at {target}")


def cmd_count(config, args) -> int:
    from PIL import Image

    out = config["out"]
    specs = _load_resolved_specs(config)
    if getattr(args, "category", None):
        wanted = {s.name for s in specs}
        if args.category not in wanted:
            raise InvalidSpecError(f"--category {args.category!r} not in config ({sorted(wanted)})")
        specs = [s for s in specs if s.name == args.category]
    counter = build_counter(config)
    segmenter = build_segmenter(config)
    count_dir = os.path.join(out, "counts")
    os.makedirs(count_dir, exist_ok=True)

    for path in _image_files(args.images):
        image = np.asarray(Image.open(path).convert("RGB"))
        stem = os.path.splitext(os.path.basename(path))[0]
        for spec in specs:
            concept = _load_concept_for(out, spec.name)
            count, diag = counting.count_fine_grained(
                image, spec, concept, counter, segmenter)
            slug = category_slug(spec.name)
            counting.save_diagnostics(
                diag, os.path.join(count_dir, f"{stem}.{slug}.json"))
            if getattr(args, "overlay", False):
                mask = counting.predict_mask(image, concept, segmenter)
                raw = counter.count(image, spec.parent or spec.name)
                special = counting.specialize(raw, mask)
                counting.write_overlay(
                    image, mask, special,
                    os.path.join(count_dir, f"{stem}.{slug}.png"))
            log.info("[count] %s / %s: %.2f (raw %.2f)",
                     stem, spec.name, count, diag.raw_count)
    return EXIT_OK


def make_pipeline(config, specs, counter, segmenter, baseline: bool = False):
    """Closure evaluating one (image, subcategory) pair to a predicted count."""
    out = config["out"]
    by_name = {s.name: s for s in specs}
    concepts = {}

    def pipeline(image, sub, parent):
        spec = by_name.get(sub) or CategorySpec(name=sub, parent=parent or None)
        broad = spec.parent or spec.name
        if baseline:
            return counting.extract_count(counter.count(image, broad))
        if sub not in concepts:
            concepts[sub] = _load_concept_for(out, sub)
        count, _diag = counting.count_fine_grained(
            image, spec, concepts[sub], counter, segmenter)
        return count

    return pipeline


def cmd_eval(config, args) -> int:
    out = config["out"]
    eval_cfg = config.get("eval") or {}
    dataset_root = getattr(args, "dataset", None) or eval_cfg.get("dataset")
    if not dataset_root:
        raise InvalidSpecError("eval needs a dataset root (positional or eval.dataset)")
    strict = bool(config.get("strict", False))
    dataset = evaluation.load_dataset(dataset_root, strict=strict)
    if not dataset:
        raise DatasetError(f"dataset under {dataset_root} is empty")

    specs = _load_resolved_specs(config)
    counter = build_counter(config)
    segmenter = build_segmenter(config)
    pipeline = make_pipeline(config, specs, counter, segmenter)
    baseline = None
    if getattr(args, "baseline", False) or eval_cfg.get("baseline", False):
        baseline = make_pipeline(config, specs, counter, segmenter, baseline=True)

    report = evaluation.run_benchmark(
        dataset, pipeline, baseline_pipeline=baseline,
        relabs_zero=eval_cfg.get("relabs_zero", "lenient"),
        sq_scope=eval_cfg.get("sq_scope", "subcategory"),
    )
    report.settings["config_hash"] = config_hash(config)
    report.settings["n_pairs"] = int((config.get("synthesis") or {}).get("n_pos", 100))
    paths = evaluation.write_report(report, out)
    o = report.overall
    log.info("[eval] MAE %.3f RMSE %.3f MRAE %.3f over %d records -> %s",
             o["mae"], o["rmse"], o["mrae"], o["n_records"], paths["json"])
    if report.skipped:
        log.warning("[eval] skipped subcategories without concepts: %s",
                    ", ".join(report.skipped))
    return EXIT_OK


def cmd_report(config, args) -> int:
    out = config["out"]
    inputs = list(getattr(args, "reports", []) or [])
    if not inputs:
        default = os.path.join(out, "report.json")
        if not os.path.isfile(default):
            raise InvalidSpecError(f"no report JSONs given and {default} does not exist")
        inputs = [default]

    docs = []
    for path in inputs:
        with open(path, encoding="utf-8") as f:
            docs.append(json.load(f))

    lines = ["# Run summary", "", "| run | n_pairs | MAE | RMSE | MRAE |", "|---|---|---|---|---|"]
    sweep = []
    for path, doc in zip(inputs, docs):
        o = doc["overall"]
        n_pairs = doc.get("settings", {}).get("n_pairs")
        lines.append(f"| {os.path.basename(os.path.dirname(path)) or path} "
                     f"| {n_pairs if n_pairs is not None else '-'} "
                     f"| {o['mae']:.3f} | {o['rmse']:.3f} | {o['mrae']:.3f} |")
        if n_pairs is not None:
            sweep.append((int(n_pairs), float(o["mae"])))
    lines.append("")
    os.makedirs(out, exist_ok=True)
    summary_path = os.path.join(out, "summary.md")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    if len(sweep) >= 2:
        evaluation.plot_sweep(sweep, os.path.join(out, "summary_sweep.png"))
    log.info("[report] wrote %s (%d runs)", summary_path, len(docs))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML or JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, help="parallel workers for synthesis")
    common.add_argument("--strict", action="store_true",
                        help="abort on the first bad dataset item")
    common.add_argument("--out", help="override the output root directory")

    parser = argparse.ArgumentParser(
        prog="finecount",
        description="Adapt a class-agnostic counter to a fine-grained category.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="synthesize pseudo-annotated training pairs")
    p.add_argument("--resume", action="store_true",
                   help="skip if artifacts already match this config")

    p = sub.add_parser("tune", parents=[common],
                       help="tune concept embeddings on synthesized pairs")
    p.add_argument("--resume", action="store_true",
                   help="skip categories whose concept matches this config")

    p = sub.add_parser("count", parents=[common],
                       help="run specialized counting on an image or directory")
    p.add_argument("images", help="image file or directory")
    p.add_argument("--category", help="restrict to one configured category")
    p.add_argument("--overlay", action="store_true",
                   help="write mask/marker overlay images")

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate on an annotated dataset")
    p.add_argument("dataset", nargs="?", help="dataset root (default: eval.dataset)")
    p.add_argument("--baseline", action="store_true",
                   help="also run the broad-prompt baseline and report deltas")

    p = sub.add_parser("report", parents=[common],
                       help="summarize one or more eval reports")
    p.add_argument("reports", nargs="*", help="report.json paths")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "tune": cmd_tune,
    "count": cmd_count,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        config = load_config(args.config) if args.config else {}
        config = _apply_overrides(config, args)
        return _COMMANDS[args.command](config, args)
    except SuggesterTransportError as exc:
        log.error("retriable: %s", exc)
        return EXIT_RETRIABLE
    except InvalidSpecError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except (OSError, yaml.YAMLError) as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except FinecountError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
