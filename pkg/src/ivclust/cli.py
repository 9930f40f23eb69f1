"""Command-line front end: CSV selection and the Monte Carlo harness."""

import os
import sys
import time

import click

from . import __version__
from .data import SelectionConfig
from .estimation import first_stage_strength
from .report import (
    ColumnSpec,
    envelope,
    export_dendrogram,
    ingest_csv,
    json_text,
    late_payload,
    selection_payload,
)
from .selection import downward_test, late_groups, prepare, union_ci_for_result
from .simulation import DESIGN_NAMES, design_by_name, run_monte_carlo

WORKERS_ENV = "IVCLUST_WORKERS"


def _split_names(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _parse_metric(text):
    if ":" in text:
        name, _, p = text.partition(":")
        try:
            return name.strip(), float(p)
        except ValueError:
            raise click.ClickException(f"bad metric exponent in {text!r}") from None
    return text.strip(), 2.0


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
@click.version_option(version=__version__, prog_name="ivclust")
def main():
    """Select valid instruments by clustering just-identified estimates."""


@main.command("select")
@click.option("--input", "input_path", required=True, type=click.Path(exists=False))
@click.option("--outcome", required=True, help="Outcome column name.")
@click.option("--endogenous", required=True, help="Comma-separated endogenous columns.")
@click.option("--instruments", required=True, help="Comma-separated instrument columns.")
@click.option("--controls", default="", help="Comma-separated exogenous control columns.")
@click.option("--metric", default="euclidean", help="euclidean, manhattan or minkowski:P.")
@click.option(
    "--linkage",
    default="ward",
    type=click.Choice(["ward", "complete", "median", "centroid"]),
)
@click.option("--alpha", type=float, default=None, help="Fixed Sargan level; default 0.1/log(n).")
@click.option("--late", is_flag=True, help="Report every effect group, not only the largest.")
@click.option("--union-ci", "union_level", type=float, default=None, help="Union-of-CIs level.")
@click.option("--json", "json_path", type=click.Path(), default=None, help="Write report JSON here.")
@click.option("--dendrogram", "dendrogram_path", type=click.Path(), default=None)
def cmd_select(
    input_path,
    outcome,
    endogenous,
    instruments,
    controls,
    metric,
    linkage,
    alpha,
    late,
    union_level,
    json_path,
    dendrogram_path,
):
    """Run selection on a CSV file and report the post-selection estimates.

    Exits 0 on success, 2 when every candidate model along the merge path
    was rejected (the flagged best candidate is still reported), 1 on
    input or configuration errors.
    """
    t0 = time.perf_counter()
    metric_name, mink_p = _parse_metric(metric)
    try:
        spec = ColumnSpec(
            outcome=outcome,
            endogenous=_split_names(endogenous),
            instruments=_split_names(instruments),
            controls=_split_names(controls),
            intercept=True,
        )
        dataset = ingest_csv(input_path, spec)
        config = SelectionConfig(
            metric=metric_name, minkowski_p=mink_p, linkage=linkage, alpha=alpha
        )
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    iv_names = list(spec.instruments)

    try:
        clean, estimates, dendrogram = prepare(dataset, config)
        if late:
            result = late_groups(dataset, config)
        else:
            result = downward_test(clean, estimates, dendrogram, config)
            union = (
                union_ci_for_result(clean, result, config, union_level)
                if union_level is not None
                else None
            )
    except ValueError as exc:
        _fail(str(exc))

    flagged = [
        {"combination": [int(j) for j in e.combo.indices], "rcond": float(e.rcond_gamma)}
        for e in estimates
        if e.rcond_gamma < config.min_condition
    ]
    diagnostics = {"n_estimates": len(estimates), "flagged_combinations": flagged}
    config_echo = {
        "input": str(input_path),
        "columns": {
            "outcome": spec.outcome,
            "endogenous": list(spec.endogenous),
            "instruments": list(spec.instruments),
            "controls": list(spec.controls),
            "intercept": spec.intercept,
        },
        "metric": config.metric,
        "minkowski_p": config.minkowski_p,
        "linkage": config.linkage,
        "significance": (
            {"rule": "fixed", "alpha": config.alpha}
            if config.alpha is not None
            else {"rule": "default", "alpha": config.significance_level(clean.n)}
        ),
        "min_condition": config.min_condition,
        "max_combinations": config.max_combinations,
        "seed": config.seed,
    }

    if late:
        click.echo(f"effect groups found at K={result.K}:")
        for g in result.groups:
            names = ", ".join(iv_names[i] for i in g.iv_indices)
            center = ", ".join(f"{c:.6g}" for c in g.center)
            click.echo(f"  group [{names}]  center: {center}")
            for name, b, s in zip(spec.endogenous, g.fit.beta, g.fit.se):
                click.echo(f"    {name}: {b:.6g} (se {s:.6g})")
            click.echo(
                f"    sargan p-value: {g.sargan.p_value:.4g} (df {g.sargan.df})"
            )
        payload_kind, payload = "late", late_payload(result)
    else:
        strength = first_stage_strength(clean, result.valid)
        n_inv = len(result.invalid)
        click.echo(f"selected {n_inv} invalid of {clean.J} candidate instruments")
        if n_inv:
            click.echo("invalid: " + ", ".join(iv_names[i] for i in result.invalid))
        if result.all_rejected:
            click.echo(
                "warning: every candidate rejected; reporting the largest "
                "p-value model (flagged)"
            )
        click.echo("post-selection estimates:")
        for name, b, s in zip(spec.endogenous, result.fit.beta, result.fit.se):
            click.echo(f"  {name}: {b:.6g} (se {s:.6g})")
        sar = result.path[result.stop_K - 1].sargan
        click.echo(
            f"sargan: statistic {sar.statistic:.6g}, df {sar.df}, "
            f"p-value {sar.p_value:.4g}, level {config.significance_level(clean.n):.4g}"
        )
        click.echo(f"first-stage strength: {strength:.6g}")
        if union_level is not None:
            for name, (lo, hi) in zip(spec.endogenous, union):
                click.echo(f"union CI ({1 - union_level:.0%}) {name}: [{lo:.6g}, {hi:.6g}]")
        payload_kind, payload = "selection", selection_payload(
            result, strength, union_ci=union
        )

    seconds = time.perf_counter() - t0
    doc = envelope(__version__, config_echo, payload_kind, payload, diagnostics, seconds)
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(json_text(doc) + "\n")
    if dendrogram_path:
        with open(dendrogram_path, "w", encoding="utf-8") as fh:
            fh.write(json_text(export_dendrogram(dendrogram, estimates)) + "\n")
    if not late and result.all_rejected:
        sys.exit(2)


@main.command("simulate")
@click.option("--design", required=True, help="Design name, e.g. strong_p1.")
@click.option("--n", default=2000, show_default=True, help="Sample size per replication.")
@click.option("--reps", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option(
    "--methods",
    default="oracle,naive,ahc",
    show_default=True,
    help="Comma-separated subset of oracle,naive,ahc.",
)
def cmd_simulate(design, n, reps, seed, methods):
    """Run a Monte Carlo design and print the metrics table plus JSON.

    Worker count is read from the IVCLUST_WORKERS environment variable
    (default 1); reports are identical for any worker count.
    """
    if design not in DESIGN_NAMES:
        _fail(f"unknown design {design!r}; valid names: {', '.join(DESIGN_NAMES)}")
    try:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    except ValueError:
        workers = 1
    try:
        spec = design_by_name(design, n)
        report = run_monte_carlo(
            spec, reps=reps, seed=seed, methods=_split_names(methods), workers=workers
        )
    except ValueError as exc:
        _fail(str(exc))
    click.echo(report.to_text())
    click.echo("")
    click.echo(json_text(report.to_json_dict()))


if __name__ == "__main__":
    main()
