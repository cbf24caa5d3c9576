"""Command-line entry point: ``mmshap <subcommand> [options]``.

Stages hand off through directories::

    generate   -> cohort dir      (raw records, labels, ground truth)
    preprocess -> processed dir   (features.csv, labels.csv, manifest.json)
    train      -> model dir       (bundle/, metrics.csv, runs.csv, split.json)
    eval       -> eval dir        (metrics.csv, predictions.csv)
    explain    -> explain dir     (report_<id>.json + plot_<id>.json, or global.csv)
    report     -> report dir      (report.md)

Every option can also come from a flat JSON config (``--config``); flags
override the file. All randomness derives from ``--seed`` and no artifact
carries a timestamp, so repeating a command reproduces its outputs byte for
byte.

Exit status: 0 on success, 1 for usage errors, 2 for data or validation errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmshap import __version__
from mmshap.attribution import (
    BACKGROUND_CAP,
    BackgroundSet,
    ExplainConfig,
    explain_case,
    explain_cohort,
)
from mmshap.evaluation import METRIC_COLUMNS, RunSummary, classification_metrics, write_results_table
from mmshap.fusion import MultimodalModel
from mmshap.io import read_cohort, read_json, write_cohort, write_json
from mmshap.pipeline import (
    FUSION_VARIANTS,
    UNIMODAL_NAMES,
    ExperimentConfig,
    _columns,
    load_processed,
    preprocess_cohort,
    run_cv,
    run_split,
    save_processed,
)
from mmshap.synth import GeneratorConfig, default_missing_rates, generate_cohort, inject_missingness

SUBCOMMANDS = ("generate", "preprocess", "train", "eval", "explain", "report")
MODEL_ORDER = tuple(UNIMODAL_NAMES.values()) + tuple(FUSION_VARIANTS)
PROFILES = {
    "full": {"n_patients": 1669, "n_repeats": 5, "k_folds": 5},
    "smoke": {"n_patients": 400, "n_repeats": 2, "k_folds": 2},
}
LOCAL_DEFAULTS = {"samples": 256, "background": BACKGROUND_CAP}
GLOBAL_DEFAULTS = {"samples": 32, "background": 32}
PATH_FIELDS = ("out", "cohort_dir", "processed_dir", "model_dir", "explain_dir")


class UsageError(Exception):
    """Bad command line or configuration; exit status 1."""


class DataError(Exception):
    """Input data or artifacts are unusable; exit status 2."""


@dataclass
class RunConfig:
    """Every tunable of every subcommand; ``None`` means "use the profile default"."""

    seed: int = 0
    out: str | None = None
    cohort_dir: str | None = None
    processed_dir: str | None = None
    model_dir: str | None = None
    explain_dir: str | None = None
    profile: str = "full"
    # generate
    n_patients: int | None = None
    prevalence: float = 0.078
    signal_weights: list = field(default_factory=lambda: [2.5, 0.5, 0.5, 0.5, 0.5])
    vitals_min_length: int = 120
    vitals_max_length: int = 1337
    # preprocess
    knn_k: int = 10
    # train
    protocol: str = "cv"
    n_repeats: int | None = None
    k_folds: int | None = None
    max_epochs: int = 100
    patience: int = 10
    lr_halving_patience: int = 5
    batch_size: int = 32
    dropout: float = 0.3
    l2_weight: float = 1e-3
    stage1_lr: float = 5e-2
    stage2_lr: float = 5e-3
    threshold: float = 0.5
    # explain
    variant: str = "All"
    mode: str = "conserving"
    samples: int | None = None
    background: int | None = None
    case: str | None = None
    global_: bool = False
    force: bool = False

    @classmethod
    def from_mapping(cls, doc: dict, base_dir: Path) -> "RunConfig":
        """Build from a config document, rejecting unknown keys and resolving paths against ``base_dir``."""
        known = {f.name.rstrip("_"): f for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            f = known[key]
            if key in PATH_FIELDS and value is not None:
                value = str((base_dir / value).resolve())
            kwargs[f.name] = value
        return cls(**kwargs)

    def validated(self) -> "RunConfig":
        ints = ("seed", "knn_k", "max_epochs", "patience", "lr_halving_patience", "batch_size",
                "vitals_min_length", "vitals_max_length")
        for name in ints + ("n_patients", "n_repeats", "k_folds", "samples", "background"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
                raise UsageError(f"{name} must be an integer, got {v!r}")
        for name in ("prevalence", "dropout", "l2_weight", "stage1_lr", "stage2_lr", "threshold"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise UsageError(f"{name} must be a number, got {v!r}")
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        choices = {"profile": PROFILES, "protocol": ("cv", "split"), "mode": ("paper", "conserving"),
                   "variant": tuple(FUSION_VARIANTS)}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {', '.join(allowed)}; got {getattr(self, name)!r}")
        for name in ("samples", "background"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise UsageError(f"{name} must be positive")
        for name, v in PROFILES[self.profile].items():
            if getattr(self, name) is None:
                setattr(self, name, v)
        for name in PATH_FIELDS:
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, str(Path(v).resolve()))
        return self

    def to_dict(self) -> dict:
        return {f.name.rstrip("_"): getattr(self, f.name) for f in dataclasses.fields(self)}

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            max_epochs=self.max_epochs, patience=self.patience, lr_halving_patience=self.lr_halving_patience,
            batch_size=self.batch_size, dropout=self.dropout, l2_weight=self.l2_weight,
            stage1_lr=self.stage1_lr, stage2_lr=self.stage2_lr, threshold=self.threshold,
        )


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, name: str, flag: str) -> Path:
    v = getattr(cfg, name)
    if v is None:
        raise UsageError(f"missing {flag} (or config key {name!r})")
    return Path(v)


def _output_dir(cfg: RunConfig, marker: str) -> Path:
    out = _require(cfg, "out", "--out")
    if (out / marker).exists() and not cfg.force:
        raise UsageError(f"{out / marker} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(cfg: RunConfig, command: str, **extra) -> dict:
    # output location and --force do not influence results, so they stay out of the record
    config = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "force")}
    return {"command": command, "version": __version__, "config": config, **extra}


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _summaries(runs) -> dict[str, RunSummary]:
    return {m: RunSummary.from_runs([r.metrics[m] for r in runs]) for m in MODEL_ORDER if m in runs[0].metrics}


def _load_split(model_dir: Path, ids: list[str]) -> dict[str, np.ndarray]:
    split = read_json(model_dir / "split.json")
    where = {pid: i for i, pid in enumerate(ids)}
    out = {}
    for part in ("train", "val", "test"):
        unknown = [p for p in split[part] if p not in where]
        if unknown:
            raise DataError(f"split.json names patient {unknown[0]!r} that is not in the processed data")
        out[part] = np.array([where[p] for p in split[part]], dtype=int)
    return out


def _load_bundle(model_dir: Path, variant: str) -> MultimodalModel:
    path = model_dir / "bundle" / variant
    if not (path / "manifest.json").exists():
        raise DataError(f"no trained {variant!r} model under {model_dir / 'bundle'}")
    return MultimodalModel.load(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> str:
    out = _output_dir(cfg, "labels.csv")
    gen_seed, miss_seed = _child_seeds(cfg.seed, 2)
    gcfg = GeneratorConfig(
        n_patients=cfg.n_patients, prevalence_target=cfg.prevalence,
        modality_signal_weights=tuple(cfg.signal_weights), missing_rates=default_missing_rates(),
        vitals_length=(cfg.vitals_min_length, cfg.vitals_max_length), seed=gen_seed,
    )
    records, truth = generate_cohort(gcfg)
    records = inject_missingness(records, gcfg.missing_rates, miss_seed)
    columns = [f"static_{i:02d}" for i in range(gcfg.n_static)]
    write_cohort(out, records, columns)
    write_json(out / "manifest.json", _manifest(
        cfg, "generate", n_records=len(records), ground_truth=truth.to_dict(),
        missing_rates=gcfg.missing_rates, seeds={"generate": gen_seed, "missingness": miss_seed},
    ))
    return f"wrote {len(records)} records to {out} (prevalence {truth.prevalence:.4f})"


def cmd_preprocess(cfg: RunConfig) -> str:
    src = _require(cfg, "cohort_dir", "--cohort")
    out = _output_dir(cfg, "features.csv")
    records, columns = read_cohort(src)
    cohort = preprocess_cohort(records, columns, cfg.knn_k)
    cohort.manifest = {**_manifest(cfg, "preprocess"), "preprocessing": cohort.manifest}
    save_processed(out, cohort)
    m = cohort.manifest["preprocessing"]
    return f"kept {m['n_kept']} of {m['n_input']} patients; imputed {m['static_cells_imputed']} static cells"


def cmd_train(cfg: RunConfig) -> str:
    cohort = load_processed(_require(cfg, "processed_dir", "--processed"))
    out = _output_dir(cfg, "bundle")
    exp = cfg.experiment()
    if cfg.protocol == "split":
        runs, folds = [run_split(cohort, cfg.seed, exp)], [None]
    else:
        folds = []
        runs = run_cv(cohort, cfg.seed, cfg.n_repeats, cfg.k_folds, exp, progress=lambda f, r: folds.append(f))
    # bundle the run whose fused model validated best; earliest wins ties
    best = max(range(len(runs)), key=lambda i: (runs[i].val_auc["All"], -i))
    chosen = runs[best]
    for variant, model in chosen.models.items():
        model.save(out / "bundle" / variant)
    write_results_table(out / "metrics.csv", _summaries(runs))
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "repeat", "fold", "model", *METRIC_COLUMNS, "val_auc"])
        for i, (run, fold) in enumerate(zip(runs, folds)):
            rep, k = (fold.repeat, fold.fold) if fold is not None else (0, 0)
            for m in MODEL_ORDER:
                if m in run.metrics:
                    w.writerow([i, rep, k, m, *(f"{run.metrics[m][c]:.6f}" for c in METRIC_COLUMNS),
                                f"{run.val_auc[m]:.6f}"])
    ids = cohort.ids
    write_json(out / "split.json", {
        part: [ids[i] for i in idx]
        for part, idx in (("train", chosen.train_idx), ("val", chosen.val_idx), ("test", chosen.test_idx))
    })
    write_json(out / "manifest.json", _manifest(cfg, "train", bundled_run=best, n_runs=len(runs),
                                                variants=sorted(chosen.models)))
    auc = RunSummary.from_runs([r.metrics["All"] for r in runs]).mean["auc"]
    return f"trained {len(runs)} run(s); All test AUC {auc:.3f}; bundle from run {best}"


def cmd_eval(cfg: RunConfig) -> str:
    cohort = load_processed(_require(cfg, "processed_dir", "--processed"))
    model_dir = _require(cfg, "model_dir", "--model")
    out = _output_dir(cfg, "metrics.csv")
    test = _load_split(model_dir, cohort.ids)["test"]
    y = cohort.labels[test]
    summaries, preds = {}, {}
    for variant in FUSION_VARIANTS:
        if not (model_dir / "bundle" / variant).exists():
            continue
        model = _load_bundle(model_dir, variant)
        p = model.predict_proba(cohort.inputs[test][:, _columns(FUSION_VARIANTS[variant])])
        preds[variant] = p
        summaries[variant] = RunSummary.from_runs([classification_metrics(p, y, cfg.threshold)])
    if not summaries:
        raise DataError(f"no model bundles under {model_dir / 'bundle'}")
    write_results_table(out / "metrics.csv", summaries)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label", *preds])
        for j, i in enumerate(test):
            w.writerow([cohort.ids[i], int(cohort.labels[i]), *(repr(float(p[j])) for p in preds.values())])
    write_json(out / "manifest.json", _manifest(cfg, "eval", n_test=len(test)))
    return "; ".join(f"{v} AUC {s.mean['auc']:.3f}" for v, s in summaries.items())


def cmd_explain(cfg: RunConfig) -> str:
    if cfg.global_ == (cfg.case is not None):
        raise UsageError("explain needs exactly one of --case <id> or --global")
    cohort = load_processed(_require(cfg, "processed_dir", "--processed"))
    model_dir = _require(cfg, "model_dir", "--model")
    split = _load_split(model_dir, cohort.ids)
    model = _load_bundle(model_dir, cfg.variant)
    cols = _columns(FUSION_VARIANTS[cfg.variant])
    defaults = GLOBAL_DEFAULTS if cfg.global_ else LOCAL_DEFAULTS
    samples = cfg.samples or defaults["samples"]
    n_bg = cfg.background or defaults["background"]
    bg_seed, shap_seed = _child_seeds(cfg.seed, 2)
    bg = BackgroundSet.from_rows(cohort.inputs[split["train"]][:, cols], n_bg, bg_seed)
    if cfg.global_:
        out = _output_dir(cfg, "global.csv")
        ecfg = ExplainConfig(cfg.mode, "sampled", samples, shap_seed, propagate_modality=None)
        _, glob = explain_cohort(model, cohort.inputs[split["test"]][:, cols], bg, ecfg)
        with open(out / "global.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["modality", "ac_mean", "ac_sd", "rc_mean", "rc_sd"])
            for row in zip(glob.names, glob.ac, glob.ac_sd, glob.rc, glob.rc_sd):
                w.writerow([row[0], *(f"{v:.6f}" for v in row[1:])])
        write_json(out / "manifest.json", _manifest(
            cfg, "explain", n_cases=glob.n_cases, samples=samples, background=len(bg),
            seeds={"background": bg_seed, "shapley": shap_seed},
        ))
        top = glob.names[int(np.argmax(glob.rc))]
        return f"explained {glob.n_cases} test cases; largest relative contribution: {top}"
    if cfg.case not in cohort.ids:
        raise DataError(f"unknown case id {cfg.case!r}")
    i = cohort.ids.index(cfg.case)
    prop = "static" if "static" in model.encoders else None
    ecfg = ExplainConfig(cfg.mode, "auto", samples, shap_seed, propagate_modality=prop,
                         feature_names=cohort.static_columns if prop else None)
    out = _output_dir(cfg, f"report_{cfg.case}.json")
    report = explain_case(model, cohort.inputs[i, cols], bg, ecfg, case_id=cfg.case)
    doc = report.to_dict()
    doc["background"] = {"source": bg.source, "rows": len(bg), "seed": bg_seed}
    doc["label"] = int(cohort.labels[i])
    write_json(out / f"report_{cfg.case}.json", doc)
    write_json(out / f"plot_{cfg.case}.json", report.plot_data())
    return f"case {cfg.case}: prediction {report.prediction:.4f}, base value {report.base_value:.4f}"


def _fmt_cell(mean: float, sd: float, scale: float = 1.0, digits: int = 2) -> str:
    return f"{mean * scale:.{digits}f} ({sd * scale:.{digits}f})"


def cmd_report(cfg: RunConfig) -> str:
    model_dir = _require(cfg, "model_dir", "--model")
    out = _output_dir(cfg, "report.md")
    metrics_path = model_dir / "metrics.csv"
    if not metrics_path.exists():
        raise DataError(f"{metrics_path} not found; run 'train' first")
    lines = ["# Results", "", "## Test metrics, mean (sd) over runs", ""]
    lines += ["| Model | AUC | Recall | Precision | F1 |", "|---|---|---|---|---|"]
    with open(metrics_path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells = [_fmt_cell(float(row[f"{m}_mean"]), float(row[f"{m}_sd"])) for m in METRIC_COLUMNS]
            lines.append(f"| {row['model']} | " + " | ".join(cells) + " |")
    if cfg.explain_dir is not None:
        glob_path = Path(cfg.explain_dir) / "global.csv"
        if not glob_path.exists():
            raise DataError(f"{glob_path} not found; run 'explain --global' first")
        lines += ["", "## Mean relative contribution per modality, % (sd)", ""]
        lines += ["| Modality | RC | AC |", "|---|---|---|"]
        with open(glob_path, newline="") as fh:
            for row in csv.DictReader(fh):
                rc = _fmt_cell(float(row["rc_mean"]), float(row["rc_sd"]), 100.0, 1)
                ac = _fmt_cell(float(row["ac_mean"]), float(row["ac_sd"]), 1.0, 4)
                lines.append(f"| {row['modality']} | {rc} | {ac} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return f"wrote {out / 'report.md'}"


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmshap", description="Synthetic multimodal risk models with Shapley explanations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "generate": "write a synthetic cohort",
        "preprocess": "clean vitals, impute static data, build model inputs",
        "train": "pre-train encoders and fit the fusion models",
        "eval": "score bundled models on their held-out test set",
        "explain": "local (--case) or global (--global) Shapley explanation",
        "report": "render metrics and contributions as markdown tables",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="flat JSON file with RunConfig keys")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", default=None, help="overwrite existing outputs")
        if name == "generate":
            p.add_argument("--profile", choices=tuple(PROFILES))
            p.add_argument("--n-patients", dest="n_patients", type=int)
            p.add_argument("--prevalence", type=float)
        if name == "preprocess":
            p.add_argument("--cohort", dest="cohort_dir", help="directory written by 'generate'")
        if name in ("train", "eval", "explain"):
            p.add_argument("--processed", dest="processed_dir", help="directory written by 'preprocess'")
        if name == "train":
            p.add_argument("--profile", choices=tuple(PROFILES))
            p.add_argument("--protocol", choices=("cv", "split"))
        if name in ("eval", "explain", "report"):
            p.add_argument("--model", dest="model_dir", help="directory written by 'train'")
        if name == "explain":
            p.add_argument("--mode", choices=("paper", "conserving"))
            p.add_argument("--samples", type=int, help="permutations per Shapley estimate")
            p.add_argument("--background", type=int, help="background rows drawn from the training set")
            p.add_argument("--variant", choices=tuple(FUSION_VARIANTS))
            group = p.add_mutually_exclusive_group()
            group.add_argument("--case", help="patient id to explain")
            group.add_argument("--global", dest="global_", action="store_true", default=None,
                               help="aggregate over the test set")
        if name == "report":
            p.add_argument("--explained", dest="explain_dir", help="directory written by 'explain --global'")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    base = Path.cwd()
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        base = args.config.resolve().parent
    cfg = RunConfig.from_mapping(doc, base)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        if key in PATH_FIELDS:
            value = str(Path(value).resolve())
        setattr(cfg, key, value)
    return cfg.validated()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        message = COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"mmshap {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"mmshap {args.command}: {exc}", file=sys.stderr)
        return 2
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
