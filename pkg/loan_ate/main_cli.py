import json
import logging
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import typer

from .config import BenchSection, RunConfig, config_hash, load_run_config
from .embed import load_embeddings, loan_sequences, loan_vectors
from .errors import ConfigInvalid, IoFailure, LoanAteError, MissingTextFeatures
from .estimators import AteReport, loan_amount_ols, relatedness_report, run_estimators
from .ingest import descriptive_stats, ingest_files
from .neural import FittedModel
from .nuisance import NuisanceInputs, NuisancePredictions, evaluate, fit_nuisances, linear_design
from .synthbench import run_bench
from .workspace import Workspace, read_csv

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="loan-ate",
    help="Estimate the effect of group borrowing on Kiva funding time.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOption = typer.Option(None, "--config", help="JSON run config; flags override its values")
WorkspaceOption = typer.Option(None, "--workspace", help="Workspace directory (default from config)")
SeedOption = typer.Option(None, "--seed", help="Seed for splits, training and cross-validation")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Debug logging and progress bars")


# ------------------------------------------------------------
# Helpers
# ------------------------------------------------------------

def _configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="[%(levelname)s] %(name)s: %(message)s",
        force=True,
    )


@contextmanager
def _guard() -> Iterator[None]:
    """Turns pipeline errors into a JSON payload on stderr and a nonzero exit."""
    try:
        yield
    except ConfigInvalid as e:
        typer.echo(json.dumps(e.to_dict(), sort_keys=True), err=True)
        raise typer.Exit(code=2)
    except LoanAteError as e:
        typer.echo(json.dumps(e.to_dict(), sort_keys=True), err=True)
        raise typer.Exit(code=1)


def _parse_trim(trim: str) -> List[float]:
    try:
        lo, hi = (float(part) for part in trim.split(","))
    except ValueError as e:
        raise ConfigInvalid("trim", f"trim must be 'lo,hi', got {trim!r}") from e
    return [lo, hi]


def _overrides(
    workspace: Optional[Path] = None,
    seed: Optional[int] = None,
    features: Optional[str] = None,
    nuisance: Optional[str] = None,
    methods: Optional[str] = None,
    trim: Optional[str] = None,
    raw: Optional[Path] = None,
    embeddings: Optional[Path] = None,
    bench_seed: Optional[int] = None,
    replications: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    paths: Dict[str, Any] = {}
    if workspace is not None:
        paths["workspace"] = str(workspace)
    if raw is not None:
        paths["raw_data"] = str(raw)
    if embeddings is not None:
        paths["embeddings"] = str(embeddings)
    if paths:
        out["paths"] = paths
    if seed is not None:
        out["split"] = {"seed": seed}
        out["training"] = {"seed": seed}
        out["nuisance_settings"] = {"seed": seed}
    if features is not None:
        out["features"] = features
    if nuisance is not None:
        out["nuisance"] = nuisance
    if methods is not None:
        out["methods"] = [m.strip() for m in methods.split(",") if m.strip()]
    if trim is not None:
        out["trim"] = _parse_trim(trim)
    bench: Dict[str, Any] = {}
    if bench_seed is not None:
        bench["dgp"] = {"seed": bench_seed}
    if replications is not None:
        bench["replications"] = replications
    if n_jobs is not None:
        bench["n_jobs"] = n_jobs
    if bench:
        out["bench"] = bench
    return out


def _setup(config: Optional[Path], verbose: bool, **flags) -> tuple[RunConfig, Workspace]:
    _configure_logging(verbose)
    cfg = load_run_config(config, _overrides(**flags))
    ws = Workspace(Path(cfg.paths.workspace), config_hash=config_hash(cfg), verbose=verbose)
    typer.echo(f"🗂️ Workspace: {ws.root}")
    typer.echo(f"🔑 Config hash: {ws.config_hash}")
    return cfg, ws


def _text_inputs(ws: Workspace, cfg: RunConfig, need_sequences: bool) -> Dict[str, Any]:
    try:
        vectors = ws.load_loan_vectors()
        sequences = ws.load_sequences() if need_sequences else None
    except IoFailure as e:
        raise MissingTextFeatures(f"text features are not in the workspace; run `embed` first ({e.message})") from e
    return {"loan_vectors": vectors, "sequences": sequences}


def _inputs(ws: Workspace, cfg: RunConfig, nuisance: str) -> NuisanceInputs:
    dataset = ws.load_dataset()
    text: Dict[str, Any] = {}
    if cfg.features == "with_text" or nuisance != "linear":
        text = _text_inputs(ws, cfg, need_sequences=nuisance == "lstm")
    return NuisanceInputs.from_dataset(dataset, **text)


# ------------------------------------------------------------
# Commands
# ------------------------------------------------------------

@app.command()
def ingest(
    raw: Optional[Path] = typer.Argument(None, help="Raw NDJSON file, Kiva archive (.json) or directory"),
    config: Optional[Path] = ConfigOption,
    workspace: Optional[Path] = WorkspaceOption,
    seed: Optional[int] = SeedOption,
    verbose: bool = VerboseOption,
):
    """Parse raw loans, apply the cleaning rules and write the dataset."""
    with _guard():
        cfg, ws = _setup(config, verbose, workspace=workspace, seed=seed, raw=raw)
        if cfg.paths.raw_data is None:
            raise ConfigInvalid("paths.raw_data", "no raw data given (argument or paths.raw_data)")
        files = Workspace.list_raw_files(Path(cfg.paths.raw_data))
        typer.echo(f"📄 Total of found files: {len(files)}")

        result = ingest_files(files, cfg.split.fractions, cfg.split.seed, verbose=verbose)
        summary = result.summary()
        if result.dataset is None:
            ws.save_empty_dataset(result.filter_counts, result.parse_failures)
            typer.echo(json.dumps({"error": "EmptyDataset", "module": "ingest", **summary}, sort_keys=True), err=True)
            raise typer.Exit(code=1)

        ws.save_dataset(result.dataset, result.filter_counts, result.parse_failures)
        typer.echo(f"✔ Retained {summary['n_retained']} of {summary['n_input']} loans")
        for reason, count in summary["filtered"].items():
            typer.echo(f"    ⚠️  {reason}: {count}")


@app.command()
def embed(
    embeddings: Optional[Path] = typer.Option(None, "--embeddings", help="GloVe-format vector file"),
    config: Optional[Path] = ConfigOption,
    workspace: Optional[Path] = WorkspaceOption,
    verbose: bool = VerboseOption,
):
    """Turn every description into a loan vector and a word-vector sequence."""
    with _guard():
        cfg, ws = _setup(config, verbose, workspace=workspace, embeddings=embeddings)
        if cfg.paths.embeddings is None:
            raise ConfigInvalid("paths.embeddings", "no embeddings file given (--embeddings or paths.embeddings)")
        dataset = ws.load_dataset()
        table = load_embeddings(Path(cfg.paths.embeddings), cfg.embedding.dim)
        vectors, matched = loan_vectors(dataset.token_lists, table)
        sequences = loan_sequences(dataset.token_lists, table, cfg.embedding.max_len)
        ws.save_embeddings(vectors, matched, sequences, {
            "n": len(dataset),
            "dim": table.dim,
            "vocab_size": len(table),
            "n_without_match": int(np.sum(matched == 0)),
            "mean_matched": float(matched.mean()) if len(matched) else 0.0,
        })
        typer.echo(f"✔ Embedded {len(dataset)} descriptions with {len(table)} vectors (dim {table.dim})")


@app.command()
def fit(
    nuisance: Optional[str] = typer.Option(None, "--nuisance", help="linear | mlp | lstm"),
    features: Optional[str] = typer.Option(None, "--features", help="with_text | without_text"),
    config: Optional[Path] = ConfigOption,
    workspace: Optional[Path] = WorkspaceOption,
    seed: Optional[int] = SeedOption,
    verbose: bool = VerboseOption,
):
    """Fit mu1, mu0 and e, write predictions for every unit and test-split metrics."""
    with _guard():
        cfg, ws = _setup(config, verbose, workspace=workspace, seed=seed, features=features, nuisance=nuisance)
        inputs = _inputs(ws, cfg, cfg.nuisance)
        predictions = fit_nuisances(
            cfg.nuisance, inputs, cfg.features,
            settings=cfg.nuisance_settings, training=cfg.training, network=cfg.network, verbose=verbose,
        )
        tag = f"{cfg.nuisance}_{cfg.features}"
        for name, model in predictions.models.items():
            if isinstance(model, FittedModel):
                model.save(ws.path("models", f"{tag}_{name}.npz"), {"config_hash": ws.config_hash})
                ws.write_frame("models", f"{tag}_{name}_log.csv", model.log.to_frame())
            else:
                ws.write_json("models", f"{tag}_{name}.json", model.to_dict())

        path = ws.predictions_path(cfg.nuisance, cfg.features)
        ws.write_frame("predictions", path.name, predictions.to_frame())
        metrics = evaluate(predictions, inputs.split, "test")
        ws.write_json("reports", f"eval_{tag}.json", {"nuisance": cfg.nuisance, "features": cfg.features, **metrics.to_dict()})
        typer.echo(f"✔ Predictions: {path}")
        typer.echo(f"    F1 {metrics.f1:.3f} | accuracy {metrics.accuracy:.3f} | "
                   f"RMSE treated {metrics.rmse_treated:.3f} | RMSE control {metrics.rmse_control:.3f}")


@app.command()
def estimate(
    methods: Optional[str] = typer.Option(None, "--methods", help="Comma-separated: naive,baseline,dse,dre,tmle"),
    trim: Optional[str] = typer.Option(None, "--trim", help="Propensity trimming interval 'lo,hi'"),
    nuisance: Optional[str] = typer.Option(None, "--nuisance", help="Which fitted nuisances to read"),
    features: Optional[str] = typer.Option(None, "--features", help="with_text | without_text"),
    predictions_file: Optional[Path] = typer.Option(None, "--predictions", help="External predictions CSV (unit_id,w,y,mu1,mu0,e)"),
    config: Optional[Path] = ConfigOption,
    workspace: Optional[Path] = WorkspaceOption,
    seed: Optional[int] = SeedOption,
    verbose: bool = VerboseOption,
):
    """Compute ATE estimates and write the estimates report."""
    with _guard():
        cfg, ws = _setup(
            config, verbose, workspace=workspace, seed=seed,
            features=features, nuisance=nuisance, methods=methods, trim=trim,
        )
        needs_predictions = any(m in ("baseline", "dre", "tmle") for m in cfg.methods)
        predictions: Optional[NuisancePredictions] = None
        design = None
        if predictions_file is not None:
            predictions = NuisancePredictions.from_frame(read_csv(predictions_file))
            y, w = predictions.y, predictions.w
            if "dse" in cfg.methods:
                design = linear_design(_inputs(ws, cfg, "linear"), cfg.features)
        else:
            inputs = _inputs(ws, cfg, "linear")
            y, w = inputs.y, inputs.w
            if "dse" in cfg.methods:
                design = linear_design(inputs, cfg.features)
            if needs_predictions:
                frame = ws.read_frame("predictions", ws.predictions_path(cfg.nuisance, cfg.features).name)
                predictions = NuisancePredictions.from_frame(frame)

        estimates = run_estimators(
            cfg.methods, predictions, y, w, design,
            trim=tuple(cfg.trim), lambda_selection="cv", settings=cfg.nuisance_settings,
        )
        report = AteReport()
        for est in estimates:
            report.add(est, cfg.features, cfg.nuisance)
            typer.echo(f"    {est.method:<9} tau={est.tau_hat:+.4f}  se={est.se:.4f}  "
                       f"ci=({est.ci95[0]:+.4f}, {est.ci95[1]:+.4f})  n={est.n_used}/{est.n_total}")
        ws.write_frame("reports", "estimates.csv", report.to_frame())
        ws.write_json("reports", "estimates.json", report.to_dict())
        typer.echo("✔ Finished.")


@app.command()
def report(
    config: Optional[Path] = ConfigOption,
    workspace: Optional[Path] = WorkspaceOption,
    verbose: bool = VerboseOption,
):
    """Descriptive statistics, per-arm loan-amount OLS and text relatedness counts."""
    with _guard():
        cfg, ws = _setup(config, verbose, workspace=workspace)
        dataset = ws.load_dataset()
        stats = descriptive_stats(dataset)
        ws.write_json("reports", "summary.json", stats.to_dict())
        ws.write_frame("reports", "sector_table.csv", stats.sector_table)
        ws.write_frame("reports", "gender_sector.csv", stats.gender_sector_counts)
        ws.write_frame("reports", "ratio_cdf.csv", stats.ratio_cdf)
        ws.write_frame("reports", "loan_amount_ols.csv", loan_amount_ols(dataset))

        try:
            vectors = ws.load_loan_vectors()
        except IoFailure:
            typer.echo("    ⚠️  No loan vectors in the workspace; relatedness skipped")
        else:
            entries = relatedness_report(vectors, dataset.x_matrix, dataset.y, dataset.w)
            ws.write_json("reports", "relatedness.json", {"regressions": [asdict(e) for e in entries]})
        typer.echo(f"✔ Reports written to {ws.dir('reports')}")


@app.command()
def bench(
    replications: Optional[int] = typer.Option(None, "--replications", help="Override bench.replications"),
    n_jobs: Optional[int] = typer.Option(None, "--n-jobs", help="Override bench.n_jobs"),
    config: Optional[Path] = ConfigOption,
    workspace: Optional[Path] = WorkspaceOption,
    seed: Optional[int] = SeedOption,
    verbose: bool = VerboseOption,
):
    """Run the synthetic benchmark and write per-replication rows and the summary."""
    with _guard():
        cfg, ws = _setup(
            config, verbose, workspace=workspace,
            bench_seed=seed, replications=replications, n_jobs=n_jobs,
        )
        section = cfg.bench or BenchSection()
        result = run_bench(
            section.dgp, section.estimator,
            replications=section.replications,
            n_jobs=section.n_jobs,
            verbose=verbose,
        )
        ws.write_frame("reports", "bench_replications.csv", result.replications)
        ws.write_json("reports", "bench_summary.json", result.to_dict())
        typer.echo(f"🎯 True ATE: {result.true_ate:.4f}")
        for row in result.summary.to_dict(orient="records"):
            typer.echo(f"    {row['method']:<9} bias={row['bias']:+.4f}  rmse={row['rmse']:.4f}  "
                       f"coverage={row['coverage']:.2f}  ok={row['n_ok']}")
        typer.echo("✔ Finished.")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        app(args=argv, standalone_mode=False)
    except typer.Exit as e:
        return e.exit_code
    return 0


if __name__ == "__main__":
    app()
