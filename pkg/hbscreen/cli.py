#!/usr/bin/env python3
"""
hbscreen CLI

Batch command-line surface for the hemoglobin estimation and anemia screening
pipeline. Every subcommand reads its inputs from, and writes its outputs to, the
run's output directory; ``pipeline`` chains all stages except ``synth``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .core.audit import ConsumptionAudit
from .core.config import PipelineConfig, default_pipeline_config, load_pipeline_config
from .core.exceptions import HbScreenError, MissingInputError
from .core.logging_config import logging_service
from .tools.anemia_screening import (
    AnemiaScreeningService,
    bland_altman,
    results_frame,
    sensitivity_stability,
    status_distribution,
)
from .tools.dataset_service import (
    DatasetService,
    SplitAssignment,
    SubjectFeatureTable,
    load_metadata,
    split_subjects,
)
from .tools.feature_extraction import FeatureExtractionService, FeatureTable, clean_feature_table
from .tools.gbm_regressor import (
    GbmHyperparams,
    evaluate,
    gain_importance,
    load_model,
    predict,
    repeated_split_summary,
    save_model,
    train,
)
from .tools.shap_explainer import (
    TreeShapExplainer,
    category_importance,
    dependence_data,
    global_importance,
    top_features,
    wavelength_importance,
)
from .tools.signal_processing import SignalProcessingService, summarize_quality
from .tools.synthetic_ppg import SynthConfig, generate, write_corpus

console = Console()
err_console = Console(stderr=True, highlight=False, soft_wrap=True)
logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("quality", "features", "aggregate", "train", "predict", "evaluate", "explain", "screen")

# Stage files, relative to the output directory
QUALITY_SEGMENTS = "quality_segments.csv"
QUALITY_SUMMARY = "quality_summary.json"
FEATURES_SEGMENTS = "features_segments.csv"
FEATURES_CLEAN = "features_clean.csv"
DROPPED_COLUMNS = "dropped_columns.json"
SUBJECT_FEATURES = "subject_features.csv"
SPLIT = "split.json"
MODEL = "model.json"
TRAIN_TRACE = "train_trace.csv"
IMPORTANCE_GAIN = "importance_gain.csv"
PREDICTIONS = "predictions.csv"
METRICS = "metrics.json"
SCATTER = "scatter.csv"
BLAND_ALTMAN = "bland_altman.csv"
EXPLANATIONS_DIR = "explanations"
IMPORTANCE_SHAP = "importance_shap.csv"
IMPORTANCE_CATEGORY = "importance_category.csv"
IMPORTANCE_WAVELENGTH = "importance_wavelength.csv"
SCREENING = "screening.csv"
SENSITIVITY = "sensitivity.csv"
SCREENING_SUMMARY = "screening_summary.json"
AUDIT_LOG = "audit.jsonl"


def _write_json(path: Path, payload: Dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing input: {path}")
    return path


class HbScreenCLI:
    """Command-line interface for hbscreen."""

    def __init__(self):
        self.config: PipelineConfig = default_pipeline_config()
        self.audit: Optional[ConsumptionAudit] = None
        self.signal: Optional[SignalProcessingService] = None
        self.dataset: Optional[DatasetService] = None

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Main CLI entry point; returns the process exit code."""
        parser = self._create_parser()
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return 0

        try:
            self._configure(args)
            handlers: Dict[str, Callable[[argparse.Namespace], None]] = {
                "synth": self.run_synth,
                "pipeline": self.run_pipeline,
                **{stage: getattr(self, f"run_{stage}") for stage in PIPELINE_STAGES},
            }
            handlers[args.command](args)
            return 0
        except HbScreenError as e:
            logging_service.log_error_with_context("pipeline", e, {"command": args.command})
            self._emit_error(e.kind, str(e))
            return e.exit_code
        except ValidationError as e:
            first = e.errors()[0]
            self._emit_error("config", f"{'.'.join(map(str, first.get('loc', ())))}: {first.get('msg')}")
            return 2
        except Exception as e:
            logger.exception("Unexpected failure in %s", args.command)
            self._emit_error("unexpected", f"{type(e).__name__}: {e}")
            return 1

    def _create_parser(self) -> argparse.ArgumentParser:
        """Create argument parser."""
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", type=Path, help="Pipeline config JSON (defaults built from HBSCREEN_* settings)")
        common.add_argument("--seed", type=int, help="Override the run seed (split and synthetic corpus)")
        common.add_argument("--out-dir", dest="out_dir", help="Override the output directory")

        parser = argparse.ArgumentParser(
            description="hbscreen - PPG hemoglobin estimation and anemia screening",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  hbscreen synth --out-dir run1 --seed 7
  hbscreen pipeline --out-dir run1 --seed 7
  hbscreen evaluate --config run.json --repeats 10
            """,
        )
        subparsers = parser.add_subparsers(dest="command", help="Available commands")

        subparsers.add_parser("synth", parents=[common], help="Generate a synthetic four-wavelength corpus")
        subparsers.add_parser("quality", parents=[common], help="SNR/SQI per segment before and after filtering")
        subparsers.add_parser("features", parents=[common], help="Segment-level feature table and cleaning")
        subparsers.add_parser("aggregate", parents=[common], help="Subject-level vectors and train/test split")
        subparsers.add_parser("train", parents=[common], help="Fit the boosted regression model on training subjects")
        subparsers.add_parser("predict", parents=[common], help="Predict Hb for every subject")
        evaluate_parser = subparsers.add_parser("evaluate", parents=[common], help="Metrics, scatter and Bland-Altman data")
        evaluate_parser.add_argument("--repeats", type=int, help="Also summarize test metrics over N split seeds")
        subparsers.add_parser("explain", parents=[common], help="SHAP attributions, importance and dependence data")
        subparsers.add_parser("screen", parents=[common], help="WHO threshold screening and offset sensitivity")
        pipeline_parser = subparsers.add_parser("pipeline", parents=[common], help="Run every stage in order")
        pipeline_parser.add_argument("--repeats", type=int, help="Repeated-split summary in the evaluate stage")
        return parser

    # Setup helpers

    def _configure(self, args: argparse.Namespace):
        base = load_pipeline_config(args.config) if args.config else default_pipeline_config()
        self.config = base.with_overrides(seed=args.seed, out_dir=args.out_dir)
        if getattr(args, "repeats", None) is not None:
            data = self.config.model_dump()
            data["split"]["repeats"] = args.repeats
            self.config = PipelineConfig.model_validate(data)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.audit = ConsumptionAudit(self.out_dir / AUDIT_LOG)
        self.signal = SignalProcessingService(self.config.signal)
        self.dataset = DatasetService(self.config.features.aggregation_ops)

    @property
    def out_dir(self) -> Path:
        return self.config.out_dir

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    def _emit_error(self, kind: str, message: str):
        message = " ".join(message.split()).replace('"', "'")
        err_console.print(f'error={kind} message="{message}"', markup=False)

    def _load_records(self):
        paths = self.config.paths
        return self.dataset.load(paths.signals_path, paths.metadata_path, self.config.signal.fs)

    def _split(self) -> SplitAssignment:
        return SplitAssignment.load(self._path(SPLIT))

    def _target_ids(self, available: List[str]) -> List[str]:
        """Test subjects when a split exists, otherwise every available subject."""
        split_path = self._path(SPLIT)
        if split_path.exists():
            test = [sid for sid in self._split().test if sid in set(available)]
            if test:
                return test
        return sorted(available)

    def _done(self, stage: str, written: List[str], **details):
        logging_service.log_stage_finish(stage, details)
        table = Table(show_header=False, box=None)
        for name in written:
            table.add_row("wrote", str(self._path(name)))
        for key, value in details.items():
            table.add_row(key, str(value))
        console.print(Panel.fit(table, title=f"hbscreen {stage}", style="green"))

    # Stages

    def run_synth(self, args: argparse.Namespace):
        logging_service.log_stage_start("synth", {"seed": self.config.seed})
        s = self.config.synth
        synth_config = SynthConfig(
            n_subjects=s.n_subjects,
            fs=self.config.signal.fs,
            duration_s=s.duration_s,
            hb_range=s.hb_range,
            heart_rate_range=s.heart_rate_range,
            noise_sd=s.noise_sd,
            drift_amplitude=s.drift_amplitude,
            seed=self.config.seed,
        )
        records = generate(synth_config)
        write_corpus(records, self.config.paths.signals_path, self.config.paths.metadata_path)
        self._done("synth", [self.config.paths.signals_dir, self.config.paths.metadata_csv], subjects=len(records))

    def run_quality(self, args: argparse.Namespace):
        logging_service.log_stage_start("quality")
        _, records = self._load_records()
        reports = [self.signal.quality_report(r) for r in records]
        report = pd.concat(reports, ignore_index=True) if reports else pd.DataFrame()
        report.to_csv(self._path(QUALITY_SEGMENTS), index=False, float_format="%.17g")
        _write_json(self._path(QUALITY_SUMMARY), summarize_quality(report) if len(report) else {})
        self.audit.record("quality", "all", [r.subject_id for r in records])
        self._done("quality", [QUALITY_SEGMENTS, QUALITY_SUMMARY], segments=len(report))

    def run_features(self, args: argparse.Namespace):
        logging_service.log_stage_start("features")
        _, records = self._load_records()
        table = FeatureExtractionService(self.signal).table_for_records(records)
        table.to_csv(self._path(FEATURES_SEGMENTS))
        f = self.config.features
        cleaned, report = clean_feature_table(table, nan_frac_max=f.nan_frac_max, var_min=f.var_min)
        cleaned.to_csv(self._path(FEATURES_CLEAN))
        report.to_json(self._path(DROPPED_COLUMNS))
        # label-free: cleaning statistics never see hb_ref
        self.audit.record("features", "all", table.subject_ids())
        self._done(
            "features",
            [FEATURES_SEGMENTS, FEATURES_CLEAN, DROPPED_COLUMNS],
            rows=table.n_rows,
            retained=len(report.retained),
            dropped=len(report.dropped),
        )

    def run_aggregate(self, args: argparse.Namespace):
        logging_service.log_stage_start("aggregate")
        table = FeatureTable.from_csv(_require(self._path(FEATURES_CLEAN)))
        metas = load_metadata(self.config.paths.metadata_path)
        vectors = self.dataset.aggregate(table, metas)
        vectors.to_csv(self._path(SUBJECT_FEATURES))
        split = split_subjects(vectors, self.config.split.test_fraction, self.config.split.seed)
        split.save(self._path(SPLIT))
        self.audit.record("aggregate", "all", vectors.subject_ids)
        self._done("aggregate", [SUBJECT_FEATURES, SPLIT], subjects=len(vectors.subject_ids), train=len(split.train), test=len(split.test))

    def run_train(self, args: argparse.Namespace):
        logging_service.log_stage_start("train")
        vectors = SubjectFeatureTable.from_csv(self._path(SUBJECT_FEATURES))
        split = self._split()
        train_set = vectors.subset(split.train)
        names = vectors.feature_names
        g = self.config.gbm
        hyperparams = GbmHyperparams(
            n_trees=g.n_trees,
            learning_rate=g.learning_rate,
            max_depth=g.max_depth,
            min_samples_leaf=g.min_samples_leaf,
            seed=self.config.seed,
        )
        self.audit.record("train", "train", train_set.subject_ids)
        model, trace = train(train_set.matrix(names), train_set.targets(), hyperparams, names)
        save_model(model, self._path(MODEL))
        pd.DataFrame({"iteration": range(len(trace)), "rmse": trace}).to_csv(
            self._path(TRAIN_TRACE), index=False, float_format="%.17g"
        )
        gains = pd.DataFrame(list(gain_importance(model).items()), columns=["feature", "gain"])
        gains = gains.sort_values(["gain", "feature"], ascending=[False, True], kind="mergesort")
        gains.to_csv(self._path(IMPORTANCE_GAIN), index=False, float_format="%.17g")
        self._done("train", [MODEL, TRAIN_TRACE, IMPORTANCE_GAIN], trees=len(model.trees), train_rmse=f"{trace[-1]:.4f}")

    def run_predict(self, args: argparse.Namespace):
        logging_service.log_stage_start("predict")
        model = load_model(self._path(MODEL))
        vectors = SubjectFeatureTable.from_csv(self._path(SUBJECT_FEATURES))
        predictions = pd.DataFrame(
            {"subject_id": vectors.subject_ids, "hb_pred_g_l": predict(model, vectors.matrix(model.feature_names))}
        )
        predictions.to_csv(self._path(PREDICTIONS), index=False, float_format="%.17g")
        self.audit.record("predict", "all", vectors.subject_ids)
        self._done("predict", [PREDICTIONS], subjects=len(predictions))

    def _predictions(self) -> pd.DataFrame:
        return pd.read_csv(_require(self._path(PREDICTIONS)), dtype={"subject_id": str}, float_precision="round_trip")

    def _split_metrics(self, name: str, part: pd.DataFrame) -> Optional[Dict]:
        if len(part) < 2:
            logger.warning("%s split has %d subject(s); metrics reported as null", name, len(part))
            return None
        return evaluate(part["hb_pred_g_l"], part["hb_ref"]).model_dump()

    def run_evaluate(self, args: argparse.Namespace):
        logging_service.log_stage_start("evaluate")
        vectors = SubjectFeatureTable.from_csv(self._path(SUBJECT_FEATURES))
        split = self._split()
        merged = self._predictions().merge(vectors.frame[["subject_id", "hb_ref"]], on="subject_id", how="inner")
        merged = merged.sort_values("subject_id", kind="mergesort")
        parts = {
            "train": merged[merged["subject_id"].isin(split.train)],
            "test": merged[merged["subject_id"].isin(split.test)],
        }
        metrics = {name: self._split_metrics(name, part) for name, part in parts.items()}
        test = parts["test"]
        if len(test) >= 2:
            agreement = bland_altman(test["hb_pred_g_l"], test["hb_ref"])
            agreement_summary: Optional[Dict] = agreement.summary()
            agreement_rows = agreement.to_frame()
        else:
            logger.warning("Bland-Altman needs two test pairs, got %d; summary reported as null", len(test))
            agreement_summary = None
            agreement_rows = pd.DataFrame(
                {
                    "mean": (test["hb_pred_g_l"] + test["hb_ref"]).to_numpy() / 2.0,
                    "diff": (test["hb_pred_g_l"] - test["hb_ref"]).to_numpy(),
                }
            )
        payload = {"seed": split.seed, "train": metrics["train"], "test": metrics["test"], "bland_altman": agreement_summary}
        if self.config.split.repeats:
            seeds = [split.seed + i for i in range(self.config.split.repeats)]
            g = self.config.gbm
            hyperparams = GbmHyperparams(
                n_trees=g.n_trees, learning_rate=g.learning_rate, max_depth=g.max_depth,
                min_samples_leaf=g.min_samples_leaf, seed=self.config.seed,
            )
            payload["repeated_splits"] = repeated_split_summary(
                vectors.labeled(), seeds, hyperparams, self.config.split.test_fraction
            )
        _write_json(self._path(METRICS), payload)

        scatter = pd.concat(
            [
                pd.DataFrame({"hb_ref": part["hb_ref"], "hb_pred": part["hb_pred_g_l"], "split": name})
                for name, part in parts.items()
            ],
            ignore_index=True,
        )
        scatter.to_csv(self._path(SCATTER), index=False, float_format="%.17g")
        agreement_rows.to_csv(self._path(BLAND_ALTMAN), index=False, float_format="%.17g")
        self.audit.record("evaluate", "all", merged["subject_id"].tolist())

        table = Table(title="Hb estimation (g/L)")
        for column in ("split", "n", "MAE", "RMSE", "R2"):
            table.add_column(column)
        for name, m in metrics.items():
            if m is None:
                table.add_row(name, str(len(parts[name])), "n/a", "n/a", "n/a")
                continue
            r2 = "n/a" if m["r2"] is None else f"{m['r2']:.3f}"
            table.add_row(name, str(m["n"]), f"{m['mae']:.2f}", f"{m['rmse']:.2f}", r2)
        console.print(table)
        bias = "n/a" if agreement_summary is None else f"{agreement_summary['bias']:.3f}"
        self._done("evaluate", [METRICS, SCATTER, BLAND_ALTMAN], bias=bias)

    def run_explain(self, args: argparse.Namespace):
        logging_service.log_stage_start("explain")
        model = load_model(self._path(MODEL))
        vectors = SubjectFeatureTable.from_csv(self._path(SUBJECT_FEATURES))
        targets = vectors.subset(self._target_ids(vectors.subject_ids))
        X = targets.matrix(model.feature_names)
        explainer = TreeShapExplainer(model)
        for i, subject_id in enumerate(targets.subject_ids):
            explanation = explainer.explain(X[i : i + 1], subject_id=subject_id)
            explanation.to_json(self._path(EXPLANATIONS_DIR) / f"{subject_id}.json")

        importance = global_importance(model, X)
        importance.to_csv(self._path(IMPORTANCE_SHAP), index=False, float_format="%.17g")
        category_importance(importance).to_csv(self._path(IMPORTANCE_CATEGORY), index=False, float_format="%.17g")
        wavelength_importance(importance).to_csv(self._path(IMPORTANCE_WAVELENGTH), index=False, float_format="%.17g")
        written = [EXPLANATIONS_DIR, IMPORTANCE_SHAP, IMPORTANCE_CATEGORY, IMPORTANCE_WAVELENGTH]
        for feature in top_features(importance, self.config.explain.dependence_top_k):
            name = f"dependence_{feature}.csv"
            dependence_data(model, X, feature).to_csv(self._path(name), index=False, float_format="%.17g")
            written.append(name)
        self.audit.record("explain", "test", targets.subject_ids)
        self._done("explain", written, subjects=len(targets.subject_ids))

    def run_screen(self, args: argparse.Namespace):
        logging_service.log_stage_start("screen")
        predictions = self._predictions()
        metas = {m.subject_id: m for m in load_metadata(self.config.paths.metadata_path)}
        targets = set(self._target_ids(predictions["subject_id"].tolist()))
        predictions = predictions[predictions["subject_id"].isin(targets)].sort_values("subject_id", kind="mergesort")
        predictions = predictions.assign(sex=[metas[sid].sex for sid in predictions["subject_id"]])

        screening = AnemiaScreeningService()
        results = screening.screen_population(predictions[["subject_id", "hb_pred_g_l", "sex"]])
        results_frame(results).to_csv(self._path(SCREENING), index=False, float_format="%.17g")
        counts = screening.threshold_sensitivity(
            zip(predictions["hb_pred_g_l"], predictions["sex"]), self.config.screening.offsets_g_l
        )
        pd.DataFrame(list(counts.items()), columns=["offset_g_l", "anemic_count"]).to_csv(
            self._path(SENSITIVITY), index=False
        )
        snapshot = screening.table.snapshot()
        summary = {
            "n_subjects": len(results),
            "status_distribution": status_distribution(results),
            "stability_window_g_l": self.config.screening.stability_window_g_l,
            "count_spread_within_window": sensitivity_stability(counts, self.config.screening.stability_window_g_l),
            "threshold_table": {"version": snapshot.version, "checksum": snapshot.checksum},
        }
        _write_json(self._path(SCREENING_SUMMARY), summary)
        self.audit.record("screen", "test", [r.subject_id for r in results])
        self._done("screen", [SCREENING, SENSITIVITY, SCREENING_SUMMARY], anemic=summary["status_distribution"]["anemic"])

    def run_pipeline(self, args: argparse.Namespace):
        self.audit.reset()
        for stage in PIPELINE_STAGES:
            getattr(self, f"run_{stage}")(args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    return HbScreenCLI().run(argv)


if __name__ == "__main__":
    sys.exit(main())
