"""Benchmark CLI for the ACR preconditioner using Typer."""

from pathlib import Path
from typing import Any, Callable, List, Optional, Union

import click
import structlog
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .bench import BenchRecord, plane_inverse_study, run_benchmark
from .config import WEAK, BenchConfig, HOptions, KrylovOptions, ProblemKind, ProblemParams
from .core.acr import acr_setup
from .core.krylov import solve_with_fallback
from .core.planning import plane_assignment
from .core.problems import build_problem
from .exceptions import ACRError, ConfigurationError, ErrorFactory
from .exports import (
    write_block_structure_csv,
    write_csv,
    write_field,
    write_history_csv,
    write_level_stats_csv,
    write_system,
)
from .logging_setup import setup_cli_logging
from .utils import load_json_file, timed

logger = structlog.get_logger()

# Initialize rich console
console = Console()

app = typer.Typer(
    name="acr-bench",
    help="Accelerated cyclic reduction preconditioner: generate problems, factor, solve and sweep",
    add_completion=False,
    rich_markup_mode="rich",
)


class EtaParamType(click.ParamType):
    """Admissibility weight: a non-negative number or the literal 'weak'."""

    name = "eta"

    def convert(self, value: Any, param: Optional[click.Parameter], ctx: Optional[click.Context]
                ) -> Union[float, str]:
        if isinstance(value, (int, float)):
            return float(value)
        text = str(value).strip().lower()
        if text == WEAK:
            return WEAK
        try:
            eta = float(text)
        except ValueError:
            self.fail(f"{value!r} is neither a number nor '{WEAK}'", param, ctx)
        if eta < 0:
            self.fail("eta must be non-negative", param, ctx)
        return eta


ETA = EtaParamType()


def setup_logging(verbose: bool = False, log_file: Optional[Path] = None):
    """Setup structured logging."""
    setup_cli_logging(verbose, log_file)


def _fail(error: Exception, code: int = 1) -> None:
    acr_error = ErrorFactory.from_exception(error)
    console.print(f"[bold red]✗ {acr_error.user_message}[/bold red]")
    console.print(f"[dim]{acr_error.get_error_code()}[/dim]")
    raise typer.Exit(code)


def _run(action: Callable[[], Any]) -> Any:
    """Run a command body and turn library errors into exit codes."""
    try:
        return action()
    except typer.Exit:
        raise
    except ValidationError as e:
        _fail(ConfigurationError(str(e)), code=2)
    except ACRError as e:
        _fail(e)
    except (OSError, ValueError, MemoryError) as e:
        _fail(e)


def _params(contrast: float, seed: int, alpha: float, vortices: float, frequency: float,
            correlation_cells: float, rhs: str) -> ProblemParams:
    return ProblemParams(contrast=contrast, seed=seed, alpha=alpha, vortices=vortices,
                         frequency=frequency, correlation_cells=correlation_cells, rhs=rhs)


def _fmt_bytes(value: int) -> str:
    for unit in ("B", "KB", "MB", "GB"):
        if value < 1024 or unit == "GB":
            return f"{value:.0f} {unit}" if unit == "B" else f"{value:.1f} {unit}"
        value /= 1024
    return str(value)


def show_records(records: List[BenchRecord]) -> None:
    table = Table(title="Sweep Results", show_header=True)
    table.add_column("ε", justify="right", style="cyan")
    table.add_column("η", justify="right", style="cyan")
    table.add_column("n_min", justify="right")
    table.add_column("Params", style="white")
    table.add_column("Iters", justify="right")
    table.add_column("Conv", justify="center")
    table.add_column("Max rank", justify="right")
    table.add_column("Memory", justify="right")
    table.add_column("Setup (s)", justify="right")
    table.add_column("Rel. res.", justify="right")
    for r in records:
        params = f"contrast={r.contrast:g} α={r.alpha:g} a={r.vortices:g} f={r.frequency:g}"
        if r.ok:
            conv = "[green]✓[/green]" if r.converged else "[yellow]✗[/yellow]"
            table.add_row(f"{r.epsilon:g}", str(r.eta), str(r.n_min), params, str(r.iterations), conv,
                          str(r.max_rank), _fmt_bytes(r.footprint_bytes), f"{r.setup_seconds:.2f}",
                          f"{r.final_relres:.2e}")
        else:
            table.add_row(f"{r.epsilon:g}", str(r.eta), str(r.n_min), params, "-",
                          "[red]error[/red]", "-", "-", "-", r.error_kind or "")
    console.print(table)


@app.command()
def generate(
    problem: str = typer.Option("poisson", "--problem", "-p", help="poisson, convdiff or helmholtz"),
    n: int = typer.Option(15, "--n", help="Grid points per dimension"),
    contrast: float = typer.Option(0.0, "--contrast", help="Orders of magnitude of coefficient contrast"),
    seed: int = typer.Option(0, "--seed", help="Random field seed"),
    alpha: float = typer.Option(0.0, "--alpha", help="Convection strength"),
    vortices: float = typer.Option(1.0, "--vortices", help="Vortex parameter a of the flow"),
    frequency: float = typer.Option(0.0, "--frequency", help="Helmholtz frequency in Hz"),
    correlation_cells: float = typer.Option(3.0, "--correlation-cells", help="Correlation length in grid spacings"),
    field_out: Optional[Path] = typer.Option(None, "--field-out", help="Write the coefficient/velocity field"),
    matrix_out: Optional[Path] = typer.Option(None, "--matrix-out", help="Write the system in MatrixMarket format"),
):
    """Generate a test problem and optionally export its field and matrix."""
    def _body():
        params = _params(contrast, seed, alpha, vortices, frequency, correlation_cells, "problem")
        BenchConfig(problem=problem, n=n, problems=[params])
        generated = build_problem(problem, n, params)
        system = generated.system

        table = Table(title=f"Problem {generated.label}", show_header=True)
        table.add_column("Property", style="cyan")
        table.add_column("Value", style="white")
        table.add_row("Unknowns", str(system.size))
        table.add_row("Planes", str(system.n_blocks))
        table.add_row("Plane size", str(system.block_size))
        table.add_row("Nonzeros", str(system.to_sparse().nnz))
        table.add_row("Symmetric", "✓" if system.symmetric else "✗")
        for name, fld in generated.fields.items():
            if fld.kind != "flow":
                table.add_row(f"{name} range", f"[{fld.values.min():.3g}, {fld.values.max():.3g}]")
        console.print(table)

        if field_out is not None:
            name = "velocity" if problem == "helmholtz" else "kappa"
            write_field(generated.fields[name], field_out)
            console.print(f"[green]✓ Field written to {field_out}[/green]")
        if matrix_out is not None:
            write_system(system, matrix_out)
            console.print(f"[green]✓ System written to {matrix_out}[/green]")
    _run(_body)


@app.command()
def factor(
    problem: str = typer.Option("poisson", "--problem", "-p", help="poisson, convdiff or helmholtz"),
    n: int = typer.Option(15, "--n", help="Grid points per dimension"),
    contrast: float = typer.Option(0.0, "--contrast"),
    seed: int = typer.Option(0, "--seed"),
    alpha: float = typer.Option(0.0, "--alpha"),
    vortices: float = typer.Option(1.0, "--vortices"),
    frequency: float = typer.Option(0.0, "--frequency"),
    epsilon: float = typer.Option(1e-2, "--epsilon", "-e", help="Block-wise truncation accuracy"),
    eta: str = typer.Option("2", "--eta", click_type=ETA, help="Admissibility weight or 'weak'"),
    n_min: int = typer.Option(32, "--n-min", help="Leaf size"),
    coarse_rows: int = typer.Option(1, "--coarse-rows", help="Stop reduction at this many rows"),
    workers: int = typer.Option(1, "--workers", "-w", help="Threads for independent eliminations"),
    stats_out: Optional[Path] = typer.Option(None, "--stats-out", help="Per-level statistics CSV"),
    structure_out: Optional[Path] = typer.Option(None, "--structure-out",
                                                 help="Block structure CSV of the first stored inverse"),
):
    """Build the ACR preconditioner and report per-level statistics."""
    def _body():
        params = _params(contrast, seed, alpha, vortices, frequency, 3.0, "problem")
        options = HOptions(epsilon=epsilon, eta=eta, n_min=n_min)
        BenchConfig(problem=problem, n=n, problems=[params], options=[options])
        system = build_problem(problem, n, params).system
        preconditioner, seconds = timed(acr_setup, system, options, coarse_rows=coarse_rows,
                                        max_workers=workers)

        table = Table(title=f"ACR levels ({options.label()})", show_header=True)
        for column in ("Level", "Rows", "Eliminated", "Max rank", "Avg rank", "Memory", "Time (s)"):
            table.add_column(column, justify="right")
        for s in preconditioner.stats:
            table.add_row(str(s.level), str(s.rows), str(s.eliminated), str(s.max_rank),
                          f"{s.avg_rank:.1f}", _fmt_bytes(s.bytes), f"{s.seconds:.3f}")
        table.add_row("coarse", str(len(preconditioner.coarse.rows)), "-", "-", "-",
                      _fmt_bytes(preconditioner.coarse_bytes), "-")
        console.print(table)
        max_rank, avg_rank = preconditioner.rank_stats()
        console.print(f"Levels: {preconditioner.level_count}  Max rank: {max_rank}  "
                      f"Memory: {_fmt_bytes(preconditioner.footprint())} "
                      f"(dense {_fmt_bytes(preconditioner.dense_footprint())})  Setup: {seconds:.2f}s")

        if stats_out is not None:
            write_level_stats_csv(preconditioner, stats_out)
            console.print(f"[green]✓ Level statistics written to {stats_out}[/green]")
        if structure_out is not None and preconditioner.levels:
            first = preconditioner.levels[0]
            write_block_structure_csv(first.inverses[first.red[0]], structure_out)
            console.print(f"[green]✓ Block structure written to {structure_out}[/green]")
    _run(_body)


@app.command()
def solve(
    problem: str = typer.Option("poisson", "--problem", "-p", help="poisson, convdiff or helmholtz"),
    n: int = typer.Option(15, "--n", help="Grid points per dimension"),
    contrast: float = typer.Option(0.0, "--contrast"),
    seed: int = typer.Option(0, "--seed"),
    alpha: float = typer.Option(0.0, "--alpha"),
    vortices: float = typer.Option(1.0, "--vortices"),
    frequency: float = typer.Option(0.0, "--frequency"),
    rhs: str = typer.Option("problem", "--rhs", help="problem, ones or random"),
    epsilon: float = typer.Option(1e-2, "--epsilon", "-e"),
    eta: str = typer.Option("2", "--eta", click_type=ETA),
    n_min: int = typer.Option(32, "--n-min"),
    solver: Optional[str] = typer.Option(None, "--solver", help="cg or gmres (default per problem)"),
    preconditioner: str = typer.Option("acr", "--preconditioner", help="acr or none"),
    tol: float = typer.Option(1e-8, "--tol"),
    max_iters: Optional[int] = typer.Option(None, "--max-iters"),
    restart: int = typer.Option(30, "--restart"),
    no_fallback: bool = typer.Option(False, "--no-fallback", help="Fail instead of switching CG to GMRES"),
    history_out: Optional[Path] = typer.Option(None, "--history-out", help="Residual history CSV"),
):
    """Solve one problem with a preconditioned Krylov method."""
    def _body():
        params = _params(contrast, seed, alpha, vortices, frequency, 3.0, rhs)
        options = HOptions(epsilon=epsilon, eta=eta, n_min=n_min)
        defaults = KrylovOptions.default_for(problem)
        krylov = KrylovOptions(tol=tol, max_iters=max_iters or defaults.max_iters, restart=restart)
        config = BenchConfig(problem=problem, n=n, problems=[params], options=[options], solver=solver,
                             preconditioner=preconditioner, krylov=krylov)
        system = build_problem(problem, n, params).system
        apply_m = None
        if config.preconditioner == "acr":
            pc, seconds = timed(acr_setup, system, options)
            apply_m = pc.apply
            console.print(f"Setup: {seconds:.2f}s  Memory: {_fmt_bytes(pc.footprint())}")
        result, seconds = timed(solve_with_fallback, system.matvec, apply_m, system.rhs, config.krylov,
                                method=config.solver, fallback=not no_fallback)
        status = "[green]converged[/green]" if result.converged else "[yellow]not converged[/yellow]"
        console.print(f"{result.method}: {status} in {result.iterations} iterations, "
                      f"relative residual {result.final_relres:.2e} ({seconds:.2f}s)")
        if history_out is not None:
            write_history_csv(result, history_out)
            console.print(f"[green]✓ History written to {history_out}[/green]")
    _run(_body)


@app.command()
def sweep(
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="BenchConfig JSON file"),
    problem: str = typer.Option("poisson", "--problem", "-p"),
    n: int = typer.Option(15, "--n"),
    epsilon: List[float] = typer.Option([1e-1, 1e-2], "--epsilon", "-e", help="Repeat for a sweep"),
    eta: List[str] = typer.Option(["2"], "--eta", click_type=ETA, help="Repeat for a sweep"),
    n_min: List[int] = typer.Option([32], "--n-min", help="Repeat for a sweep"),
    contrast: List[float] = typer.Option([0.0], "--contrast", help="Repeat for a sweep"),
    alpha: List[float] = typer.Option([0.0], "--alpha", help="Repeat for a sweep"),
    vortices: float = typer.Option(1.0, "--vortices"),
    frequency: List[float] = typer.Option([0.0], "--frequency", help="Repeat for a sweep"),
    seed: int = typer.Option(0, "--seed"),
    solver: Optional[str] = typer.Option(None, "--solver"),
    preconditioner: str = typer.Option("acr", "--preconditioner"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="CSV of records (plus JSON config echo)"),
    history_dir: Optional[Path] = typer.Option(None, "--history-dir", help="Directory for residual histories"),
    concurrent: bool = typer.Option(False, "--concurrent", help="Run sweep points concurrently"),
    workers: int = typer.Option(2, "--workers", "-w"),
):
    """Run a sweep over H options and problem parameters.

    Exits with 0 only when every sweep point completed, converged or not.
    """
    def _body():
        if config_file is not None:
            data = load_json_file(config_file)
            if not data:
                raise ConfigurationError(f"no configuration found in {config_file}",
                                         config_path=str(config_file))
            config = BenchConfig.model_validate(data)
            if output is not None:
                config.output = output
        else:
            options = [HOptions(epsilon=e, eta=h, n_min=m) for e in epsilon for h in eta for m in n_min]
            problems = [
                ProblemParams(contrast=c, alpha=a, vortices=vortices, frequency=f, seed=seed)
                for c in contrast for a in alpha for f in frequency
            ]
            config = BenchConfig(problem=problem, n=n, options=options, problems=problems, solver=solver,
                                 preconditioner=preconditioner, output=output, history_dir=history_dir,
                                 concurrent=concurrent, max_workers=workers)

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      BarColumn(), TextColumn("{task.percentage:>3.0f}%"), console=console) as progress:
            task = progress.add_task("Running sweep...", total=100)

            def _on_progress(percentage: int, message: str) -> None:
                progress.update(task, completed=percentage, description=message)

            records = run_benchmark(config, progress_callback=_on_progress)

        show_records(records)
        if config.output is not None:
            console.print(f"[green]✓ Records written to {config.output}[/green]")
        failed = [r for r in records if not r.ok]
        if failed:
            console.print(f"[bold red]✗ {len(failed)} of {len(records)} sweep points failed[/bold red]")
            raise typer.Exit(1)
    _run(_body)


@app.command()
def plan(
    n: int = typer.Option(16, "--n", help="Number of planes (power of two)"),
    p: int = typer.Option(4, "--p", help="Number of nodes (power of two)"),
    rank: float = typer.Option(16.0, "--rank", "-k", help="Rank used by the volume model"),
    output: Optional[Path] = typer.Option(None, "--output", "-o"),
):
    """Show the plane-to-node schedule and the communication volume model."""
    def _body():
        result = plane_assignment(n, p, rank)
        table = Table(title=f"Plane schedule n={n}, p={p} (C-level {result.c_level})", show_header=True)
        for column in ("Level", "Surviving planes", "Max planes/node", "Idle nodes", "Messages"):
            table.add_column(column, justify="right")
        for row in result.as_rows():
            table.add_row(*(str(row[k]) for k in ("level", "surviving_planes", "max_planes_per_node",
                                                  "idle_nodes", "messages")))
        console.print(table)
        console.print(f"Communication volume model (k={rank:g}): {result.total_volume:,.0f}")
        if output is not None:
            write_csv(output, result.as_rows())
    _run(_body)


@app.command("eta-study")
def eta_study(
    n: int = typer.Option(64, "--n", help="Plane points per dimension"),
    contrast: float = typer.Option(4.0, "--contrast"),
    epsilon: float = typer.Option(1e-2, "--epsilon", "-e"),
    eta: List[str] = typer.Option(["2", "32", "64", "128", "weak"], "--eta", click_type=ETA),
    n_min: int = typer.Option(32, "--n-min"),
    seed: int = typer.Option(0, "--seed"),
    output: Optional[Path] = typer.Option(None, "--output", "-o"),
):
    """Memory, ranks and accuracy of the 2D plane H-inverse as eta varies."""
    def _body():
        rows = plane_inverse_study(n, contrast, epsilon, eta, seed, n_min)
        table = Table(title=f"H-inverse of a {n}x{n} plane, ε={epsilon:g}", show_header=True)
        for column in ("η", "Memory", "Max rank", "Avg rank", "‖AA⁻¹−I‖_F", "Time (s)"):
            table.add_column(column, justify="right")
        for row in rows:
            table.add_row(str(row["eta"]), _fmt_bytes(row["bytes"]), str(row["max_rank"]),
                          f"{row['avg_rank']:.1f}", f"{row['identity_error']:.2e}", f"{row['seconds']:.2f}")
        console.print(table)
        if output is not None:
            write_csv(output, rows)
    _run(_body)


@app.callback()
def main_callback(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="Also write logs to this file"),
):
    """Accelerated cyclic reduction preconditioner benchmark CLI"""
    setup_logging(verbose, log_file)


def main():
    """CLI entry point."""
    app()


if __name__ == "__main__":
    main()
