"""Rich-formatted output for training runs, calibration and progress lines."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable

import numpy as np
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from vbivec import __version__
from vbivec.model.calibration import CalibrationResult
from vbivec.state import CalibrationParams, TrainReport

console = Console()
err_console = Console(stderr=True, highlight=False, soft_wrap=True)

ASCENT_TOL = 1e-6

PHASE_STYLES: dict[str, str] = {
    "init": "dim",
    "posterior": "cyan",
    "calibration": "magenta",
    "responsibilities": "blue",
    "loadings": "green",
    "ubm": "yellow",
}


def progress_printer(metric: str = "elbo") -> Callable[[int, str, float], None]:
    """Progress callback writing ``iter=<k> phase=<name> <metric>=<v>`` lines to stderr."""

    def emit(iteration: int, phase: str, value: float) -> None:
        err_console.print(f"iter={iteration} phase={phase} {metric}={value:.17g}", markup=False)

    return emit


def calibration_to_dict(cal: CalibrationParams | None) -> dict[str, Any] | None:
    if cal is None:
        return None
    alpha = np.asarray(cal.alpha, dtype=np.float64).tolist()
    return {"alpha": alpha, "beta": cal.beta.tolist(), "diagonal": cal.is_diagonal}


def report_to_dict(report: TrainReport) -> dict[str, Any]:
    """Convert a TrainReport to a JSON-serializable dict."""
    return {
        "version": __version__,
        "recipe": report.recipe.value,
        "total_frames": report.total_frames,
        "elbo_trace": report.elbo_trace,
        "stopped_early": report.stopped_early,
        "worst_relative_delta": report.worst_relative_delta(),
        "phases": [
            {
                "iteration": p.iteration,
                "phase": p.phase,
                "elbo": p.elbo,
                "delta": p.delta,
                "seconds": p.seconds,
            }
            for p in report.phases
        ],
        "calibration": calibration_to_dict(report.calibration),
        "calibration_log": report.calibration_log,
    }


def export_json(data: dict[str, Any], path: Path) -> None:
    """Write a machine-readable report document."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    err_console.print(f"[green]Report exported to {path}[/green]")


def print_train_report(report: TrainReport) -> None:
    """Print the per-phase ascent table and a summary panel."""
    worst = report.worst_relative_delta()
    ok = worst >= -ASCENT_TOL
    style = "green" if ok else "red"
    final = report.elbo_trace[-1] if report.elbo_trace else float("nan")
    per_frame = final / report.total_frames if report.total_frames else float("nan")
    err_console.print(
        Panel(
            f"[bold]Recipe:[/bold] {report.recipe.value}\n"
            f"[bold]Iterations:[/bold] {len(report.elbo_trace) - 1}"
            f"{' (stopped early)' if report.stopped_early else ''}\n"
            f"[bold]Final Σ elbo:[/bold] {final:.6f} ({per_frame:.4f} per frame)\n"
            f"[bold]Worst relative delta:[/bold] [{style}]{worst:.3e}[/{style}]",
            title="Training Report",
            border_style=style,
            expand=False,
        )
    )
    if not report.phases:
        return
    table = Table(title="Phase Ascent", show_lines=False)
    table.add_column("Iter", style="dim", justify="right")
    table.add_column("Phase")
    table.add_column("Σ elbo", justify="right")
    table.add_column("Δ", justify="right")
    table.add_column("Seconds", style="dim", justify="right")
    for p in report.phases:
        phase_style = PHASE_STYLES.get(p.phase, "white")
        delta_style = "red" if p.delta < -ASCENT_TOL * max(abs(p.elbo), 1.0) else "white"
        table.add_row(
            str(p.iteration),
            f"[{phase_style}]{p.phase}[/{phase_style}]",
            f"{p.elbo:.6f}",
            f"[{delta_style}]{p.delta:+.6g}[/{delta_style}]",
            f"{p.seconds:.3f}",
        )
    err_console.print(table)


def print_calibration_result(result: CalibrationResult) -> None:
    table = Table(title="Calibration", show_lines=False)
    table.add_column("Quantity", style="cyan")
    table.add_column("Before", justify="right")
    table.add_column("After", justify="right")
    table.add_row("objective", f"{result.objective_before:.10g}", f"{result.objective_after:.10g}")
    table.add_row("mean entropy (nats)", f"{result.entropy_before:.6f}", f"{result.entropy_after:.6f}")
    alpha = result.params.alpha
    alpha_text = f"{alpha:.6f}" if np.ndim(alpha) == 0 else np.array2string(np.asarray(alpha), precision=4)
    err_console.print(table)
    err_console.print(
        f"alpha={alpha_text}  iterations={result.iterations}  converged={result.converged}  "
        f"rejected_steps={result.rejected_steps}",
        markup=False,
    )
