"""vb-ivector command line: dataset synthesis, training, extraction and scoring."""

from __future__ import annotations

import os
import shutil
from collections.abc import Iterator
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
import typer
from rich.markup import escape
from scipy.special import log_softmax

from vbivec.config import RunConfig, get_settings, load_run_config
from vbivec.errors import ConfigError, VBIVectorError
from vbivec.report import err_console

if TYPE_CHECKING:
    from vbivec.dataio.formats import StoredModel

app = typer.Typer(
    name="vb-ivector",
    help="i-vector extraction and extractor training with mean-field variational Bayes.",
    add_completion=False,
)


class PosteriorKind(str, Enum):
    TRUTH = "truth"
    NOISY = "noisy"
    PLANTED = "planted"
    NONE = "none"


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Turn library errors into the documented exit codes."""
    try:
        yield
    except VBIVectorError as e:
        err_console.print(f"[red]{type(e).__name__}: {escape(str(e))}[/red]")
        raise typer.Exit(e.exit_code) from e


def _run_config(config: Optional[Path], **overrides: object) -> RunConfig:
    return load_run_config(config, overrides, get_settings())


def _threads(run: RunConfig) -> int:
    return run.threads if run.threads > 0 else (os.cpu_count() or 1)


def _require(value: Optional[Path], name: str) -> Path:
    if value is None:
        raise ConfigError(f"missing required setting: {name}")
    return value


def _segment_data(run: RunConfig, stored: StoredModel | None, need_posteriors: bool | None = None):
    """Load segments (and raw posteriors when the model's recipe needs them)."""
    from vbivec.dataio.manifest import load_posteriors, load_segments, read_manifest
    from vbivec.state import Recipe

    manifest = read_manifest(_require(run.manifest, "manifest"))
    threads = _threads(run)
    segs = load_segments(manifest, threads)
    recipe = stored.recipe if stored is not None and stored.recipe is not None else Recipe.CLASSICAL
    if need_posteriors is None:
        need_posteriors = recipe.uses_posteriors
    raws = load_posteriors(manifest, run.posterior_floor, threads, segs) if need_posteriors else None
    return segs, raws, recipe


@app.command()
def synth(
    out_dir: Path = typer.Argument(..., help="Directory to create the dataset in"),
    num_components: int = typer.Option(4, "--num-components", "-n", help="Mixture components N"),
    dim: int = typer.Option(5, "--dim", "-d", help="Feature dimension D"),
    ivector_dim: int = typer.Option(2, "--ivector-dim", "-m", help="I-vector dimension M"),
    segments: int = typer.Option(200, "--segments", "-s", help="Number of segments"),
    frames: int = typer.Option(100, "--frames", "-t", help="Frames per segment"),
    seed: int = typer.Option(0, "--seed", help="Master seed"),
    covariance: str = typer.Option("diagonal", "--covariance", help="diagonal or full"),
    separation: float = typer.Option(3.0, "--separation", help="Spread of the component means"),
    posteriors: PosteriorKind = typer.Option(PosteriorKind.TRUTH, "--posteriors", "-p", help="Posterior files to emit"),
    temperature: float = typer.Option(1.0, "--temperature", help="Confusion temperature for noisy posteriors"),
    planted_alpha: float = typer.Option(2.0, "--planted-alpha", help="Calibration scale planted into planted posteriors"),
    force: bool = typer.Option(False, "--force", "-f", help="Overwrite an existing output directory"),
) -> None:
    """Sample a synthetic dataset from a random i-vector model.

    ``--posteriors planted`` writes raw posteriors that a known calibration maps
    exactly onto the optimal responsibilities of ``planted_model/`` (the truth
    model with zero loadings); the calibration goes to ``planted_calibration.json``.
    """
    from vbivec.dataio.formats import IVectorRecord, write_features, write_ivectors, write_model, write_posteriors
    from vbivec.dataio.manifest import Manifest, ManifestEntry, write_manifest
    from vbivec.model.core import (
        POSTERIOR_STREAM,
        derive_seed,
        noisy_posteriors,
        planted_posteriors,
        random_model,
        sample_dataset,
        substream,
    )
    from vbivec.model.gmm import log_joint
    from vbivec.report import calibration_to_dict, export_json
    from vbivec.state import CalibrationParams, CovarianceMode, ModelDims, SegmentFeatures

    with _exit_codes():
        if out_dir.exists():
            if not force:
                raise ConfigError(f"{out_dir} already exists; pass --force to overwrite")
            if out_dir.is_dir():
                shutil.rmtree(out_dir)
            else:
                out_dir.unlink()
        try:
            mode = CovarianceMode(covariance)
        except ValueError as e:
            raise ConfigError(f"unknown covariance mode {covariance!r}") from e
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        if separation < 0.0:
            raise ConfigError(f"separation must be non-negative, got {separation}")

        model = random_model(ModelDims(num_components, dim, ivector_dim), seed, mode, mean_scale=separation)
        data = sample_dataset(model, segments, frames, seed)
        planted_model = model.ubm()
        planted = None
        if posteriors is PosteriorKind.PLANTED:
            beta = 0.5 * substream(seed, POSTERIOR_STREAM).standard_normal(num_components)
            planted = CalibrationParams(planted_alpha, beta)

        (out_dir / "features").mkdir(parents=True)
        if posteriors is not PosteriorKind.NONE:
            (out_dir / "posteriors").mkdir()
        manifest = Manifest(dim=dim, num_components=num_components if posteriors is not PosteriorKind.NONE else None)
        for k, (seg, truth) in enumerate(data):
            feat_path = out_dir / "features" / f"{seg.segment_id}.feat"
            write_features(feat_path, seg)
            post_path = None
            if posteriors is not PosteriorKind.NONE:
                post_path = out_dir / "posteriors" / f"{seg.segment_id}.post"
                if posteriors is PosteriorKind.TRUTH:
                    probs = truth.one_hot(num_components)
                elif posteriors is PosteriorKind.PLANTED:
                    # scored on the stored float32 frames
                    stored = SegmentFeatures(seg.frames.astype(np.float32), seg.segment_id)
                    probs = planted_posteriors(log_softmax(log_joint(planted_model, stored), axis=1), planted)
                else:
                    rng = substream(derive_seed(seed, k), POSTERIOR_STREAM)
                    probs = noisy_posteriors(truth.path, num_components, temperature, rng)
                write_posteriors(post_path, probs)
            manifest.entries.append(ManifestEntry(seg.segment_id, feat_path, post_path))

        write_manifest(out_dir / "manifest.tsv", manifest)
        write_model(out_dir / "truth_model", model)
        write_ivectors(out_dir / "truth_ivectors.txt", [IVectorRecord(seg.segment_id, t.ivector) for seg, t in data])
        with open(out_dir / "truth_paths.tsv", "w", encoding="utf-8") as f:
            for seg, t in data:
                f.write(f"{seg.segment_id}\t{' '.join(str(int(s)) for s in t.path)}\n")
        if planted is not None:
            write_model(out_dir / "planted_model", planted_model)
            export_json(calibration_to_dict(planted), out_dir / "planted_calibration.json")

    err_console.print(f"[green]Wrote {segments} segments to {out_dir}[/green]")


@app.command("train-ubm")
def train_ubm(
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Dataset manifest"),
    out_model: Optional[Path] = typer.Option(None, "--out", "-o", help="Output model directory"),
    num_components: Optional[int] = typer.Option(None, "--num-components", "-n", help="Mixture components N"),
    iterations: Optional[int] = typer.Option(None, "--iterations", "-i", help="EM iterations"),
    covariance: Optional[str] = typer.Option(None, "--covariance", help="diagonal or full"),
    ivector_dim: Optional[int] = typer.Option(None, "--ivector-dim", "-m", help="Width of the (zero) loadings stored with the UBM"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Initialization seed"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads (0 = all cores)"),
    reproducible: Optional[bool] = typer.Option(None, "--reproducible/--fast", help="Deterministic reduction order"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key=value config file"),
) -> None:
    """Train an ordinary GMM (the UBM) with EM; the LB⁰ trace goes to stderr."""
    from vbivec.dataio.formats import write_model
    from vbivec.dataio.manifest import load_segments, read_manifest
    from vbivec.model.gmm import VarianceFloor
    from vbivec.model.gmm import train_ubm as fit_ubm
    from vbivec.report import progress_printer

    with _exit_codes():
        run = _run_config(
            config,
            manifest=manifest,
            model_out=out_model,
            num_components=num_components,
            iterations=iterations,
            covariance_mode=covariance,
            ivector_dim=ivector_dim,
            seed=seed,
            threads=threads,
            reproducible=reproducible,
        )
        if run.num_components is None:
            raise ConfigError("train-ubm needs num_components (-n)")
        segs = load_segments(read_manifest(_require(run.manifest, "manifest")), _threads(run))
        params, _ = fit_ubm(
            segs,
            run.num_components,
            run.covariance_mode,
            run.iterations,
            run.seed,
            VarianceFloor(run.variance_floor_abs, run.variance_floor_frac),
            run.min_component_mass,
            run.empty_component_policy,
            run.ivector_dim,
            _threads(run),
            run.reproducible,
            progress=progress_printer("lb0"),
        )
        write_model(_require(run.model_out, "model_out"), params)


@app.command()
def train(
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Dataset manifest"),
    out_model: Optional[Path] = typer.Option(None, "--out", "-o", help="Output model directory"),
    init_model: Optional[Path] = typer.Option(None, "--init", help="Initial UBM or model directory"),
    recipe: Optional[str] = typer.Option(None, "--recipe", "-r", help="classical, phonetic, phonetic-joint, calibrated or vbem"),
    iterations: Optional[int] = typer.Option(None, "--iterations", "-i", help="Outer iterations"),
    ivector_dim: Optional[int] = typer.Option(None, "--ivector-dim", "-m", help="I-vector dimension M"),
    update_u: Optional[bool] = typer.Option(None, "--update-u/--fixed-u", help="Also re-estimate (w, μ, C)"),
    diagonal_alpha: Optional[bool] = typer.Option(None, "--diagonal-alpha/--scalar-alpha", help="Per-component calibration scale"),
    covariance: Optional[str] = typer.Option(None, "--covariance", help="diagonal or full (posterior recipes)"),
    report: Optional[Path] = typer.Option(None, "--report", help="Write the training report as JSON"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Loadings initialization seed"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads (0 = all cores)"),
    reproducible: Optional[bool] = typer.Option(None, "--reproducible/--fast", help="Deterministic reduction order"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key=value config file"),
) -> None:
    """Train an extractor with one of the VB recipes."""
    from vbivec.dataio.formats import read_model, write_model
    from vbivec.dataio.manifest import load_posteriors, load_segments, read_manifest
    from vbivec.report import export_json, print_train_report, progress_printer, report_to_dict
    from vbivec.trainer import TrainConfig
    from vbivec.trainer import train as run_recipe

    with _exit_codes():
        run = _run_config(
            config,
            manifest=manifest,
            model_out=out_model,
            model_in=init_model,
            recipe=recipe,
            iterations=iterations,
            ivector_dim=ivector_dim,
            update_u=update_u,
            diagonal_alpha=diagonal_alpha,
            covariance_mode=covariance,
            report=report,
            seed=seed,
            threads=threads,
            reproducible=reproducible,
        )
        n_threads = _threads(run)
        cfg = TrainConfig.from_run_config(run, threads=n_threads)
        entries = read_manifest(_require(run.manifest, "manifest"))
        segs = load_segments(entries, n_threads)
        raws = load_posteriors(entries, run.posterior_floor, n_threads, segs) if cfg.recipe.uses_posteriors else None
        init = read_model(run.model_in).params if run.model_in is not None else None

        params, result = run_recipe(segs, cfg, init=init, raws=raws, progress=progress_printer("elbo"))

        write_model(_require(run.model_out, "model_out"), params, result.calibration, cfg.recipe)
        print_train_report(result)
        if run.report is not None:
            export_json(report_to_dict(result), run.report)


@app.command()
def extract(
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Dataset manifest"),
    model: Optional[Path] = typer.Option(None, "--model", help="Model directory"),
    output: Optional[Path] = typer.Option(None, "--out", "-o", help="Output i-vector file"),
    covariance: bool = typer.Option(False, "--covariance", help="Also write posterior covariances"),
    binary: bool = typer.Option(False, "--binary", help="Write the binary i-vector variant"),
    vb_iterations: int = typer.Option(0, "--vb-iterations", help="Extra mean-field responsibility/posterior cycles"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads (0 = all cores)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key=value config file"),
) -> None:
    """Extract i-vector posteriors for every segment of a manifest."""
    from vbivec.dataio.formats import IVectorRecord, read_model, write_ivectors
    from vbivec.model.ivector import extract as extract_one
    from vbivec.model.ivector import extract_full_vb, project
    from vbivec.parallel import map_segments
    from vbivec.trainer import responsibilities_for

    with _exit_codes():
        if vb_iterations < 0:
            raise ConfigError("--vb-iterations must be >= 0")
        run = _run_config(config, manifest=manifest, model_in=model, output=output, threads=threads)
        stored = read_model(_require(run.model_in, "model_in"))
        segs, raws, recipe = _segment_data(run, stored)
        n_threads = _threads(run)
        params = stored.params
        proj = project(params)
        resps = responsibilities_for(recipe, params, segs, raws, stored.calibration, n_threads)

        def one(k: int) -> IVectorRecord:
            if vb_iterations:
                _, post, _ = extract_full_vb(segs[k], params, resps[k], vb_iterations, proj=proj)
            else:
                post = extract_one(segs[k], resps[k], params, proj)
            return IVectorRecord(segs[k].segment_id, post.mean, post.covariance if covariance else None)

        records = map_segments(one, list(range(len(segs))), n_threads)
        write_ivectors(_require(run.output, "output"), records, binary=binary)


@app.command()
def elbo(
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Dataset manifest"),
    model: Optional[Path] = typer.Option(None, "--model", help="Model directory"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads (0 = all cores)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key=value config file"),
) -> None:
    """Print per-segment VB lower bounds and their total."""
    from vbivec.dataio.formats import read_model
    from vbivec.model.ivector import elbo as segment_elbo
    from vbivec.model.ivector import extract as extract_one
    from vbivec.model.ivector import project
    from vbivec.parallel import map_segments, ordered_sum
    from vbivec.trainer import responsibilities_for

    with _exit_codes():
        run = _run_config(config, manifest=manifest, model_in=model, threads=threads)
        stored = read_model(_require(run.model_in, "model_in"))
        segs, raws, recipe = _segment_data(run, stored)
        n_threads = _threads(run)
        params = stored.params
        proj = project(params)
        resps = responsibilities_for(recipe, params, segs, raws, stored.calibration, n_threads)

        def one(k: int) -> float:
            post = extract_one(segs[k], resps[k], params, proj)
            return segment_elbo(segs[k], resps[k], post, params, proj=proj)

        values = map_segments(one, list(range(len(segs))), n_threads)

    for seg, value in zip(segs, values):
        typer.echo(f"{seg.segment_id}\t{value:.17g}")
    typer.echo(f"TOTAL\t{ordered_sum(values):.17g}")


@app.command()
def calibrate(
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Dataset manifest with posterior column"),
    model: Optional[Path] = typer.Option(None, "--model", help="Model directory"),
    out_model: Optional[Path] = typer.Option(None, "--out", "-o", help="Output model directory"),
    diagonal_alpha: Optional[bool] = typer.Option(None, "--diagonal-alpha/--scalar-alpha", help="Per-component calibration scale"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads (0 = all cores)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="key=value config file"),
) -> None:
    """Fit the calibration (α, β) at a fixed model and fixed i-vector posteriors."""
    from vbivec.dataio.formats import read_model, write_model
    from vbivec.model.calibration import optimize_calibration
    from vbivec.model.ivector import expected_likelihoods, project
    from vbivec.model.ivector import extract as extract_one
    from vbivec.parallel import map_segments
    from vbivec.report import print_calibration_result
    from vbivec.state import CalibrationParams, Recipe
    from vbivec.trainer import responsibilities_for

    with _exit_codes():
        run = _run_config(
            config, manifest=manifest, model_in=model, model_out=out_model, diagonal_alpha=diagonal_alpha, threads=threads
        )
        stored = read_model(_require(run.model_in, "model_in"))
        segs, raws, _ = _segment_data(run, stored, need_posteriors=True)
        n_threads = _threads(run)
        params = stored.params
        proj = project(params)
        start = stored.calibration
        # an explicit flag or config key beats the stored calibration shape
        explicit = "diagonal_alpha" in run.model_fields_set
        diagonal = run.diagonal_alpha if explicit or start is None else start.is_diagonal
        if start is None:
            start = CalibrationParams.identity(params.dims.N, diagonal)
        resps = responsibilities_for(Recipe.CALIBRATED, params, segs, raws, start, n_threads)

        def optimal_log_r(k: int) -> np.ndarray:
            post = extract_one(segs[k], resps[k], params, proj)
            return log_softmax(expected_likelihoods(segs[k], post, params, proj), axis=1)

        log_rs = map_segments(optimal_log_r, list(range(len(segs))), n_threads)
        result = optimize_calibration(
            raws, log_rs, start, tol=run.calibration_tol, max_iter=run.calibration_max_iter, diagonal=diagonal
        )
        write_model(_require(run.model_out, "model_out"), params, result.params, Recipe.CALIBRATED)

    print_calibration_result(result)
    typer.echo(f"objective_before\t{result.objective_before:.17g}")
    typer.echo(f"objective_after\t{result.objective_after:.17g}")


if __name__ == "__main__":
    app()
