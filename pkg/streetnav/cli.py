"""Command line entry point, ``streetnav <command>``."""
import logging
import sys
from functools import wraps
from pathlib import Path
from typing import Optional, Tuple

import click

from .config import PipelineConfig, apply_overrides, dump_config, load_config
from .exceptions import BaseStreetNavException, ManifestValidationError, UsageError
from .pipeline import (
    EPISODE_INDEX,
    POLICIES,
    BatchReport,
    cmd_annotate,
    cmd_condition,
    cmd_eval,
    cmd_flowmask,
    cmd_swap_negatives,
    selftest,
    store_episodes,
)
from .scenes import synthetic_episodes, write_bundled_manifest
from .version import __version__

EXIT_FAILURE = 1

manifest_option = click.option(
    "--manifest",
    type=click.Path(path_type=Path),
    help="JSON manifest of scene entries.",
)
out_option = click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=Path("out"),
    show_default=True,
    help="Output directory.",
)
jobs_option = click.option(
    "--jobs", type=int, default=1, show_default=True, help="Entries run at once."
)


_CONFIG_OPTIONS = (
    click.option(
        "--config",
        "config_path",
        type=click.Path(path_type=Path),
        help="JSON configuration file.",
    ),
    click.option("--set", "overrides", multiple=True, help="section.key=value"),
    click.option("--seed", type=int, help="Overrides the configured seed."),
)


def config_options(func):
    for option in reversed(_CONFIG_OPTIONS):
        func = option(func)
    return func


def _resolve_config(
    base: Optional[PipelineConfig],
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    seed: Optional[int],
) -> PipelineConfig:
    if base is None or config_path is not None:
        base = load_config(config_path)
    config = apply_overrides(base, overrides)
    if seed is not None:
        config = apply_overrides(config, [f"seed={seed}"])
    return config


def with_config(command):
    """
    accepts the config options after the subcommand name too; they apply on top
    of the ones given before it, except ``--config`` which starts over from its file
    """

    @config_options
    @click.pass_context
    @wraps(command)
    def wrapper(ctx: click.Context, config_path, overrides, seed, **kwargs):
        ctx.obj = _resolve_config(ctx.obj, config_path, overrides, seed)
        return command(**kwargs)

    return wrapper


def _configure_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"missing option {flag}")
    return value


def _finish(report: BatchReport) -> None:
    click.echo(
        f"written {len(report.written)}, skipped {len(report.skipped)}, "
        f"errors {len(report.errors)}"
    )
    for record in report.skipped:
        click.echo(f"skipped {record['id']}: {record['reason']}")
    for record in report.errors:
        click.echo(f"error {record['id']} [{record['stage']}]: {record['reason']}")
    if report.failed:
        sys.exit(EXIT_FAILURE)


class StreetNavGroup(click.Group):
    """maps library errors onto exit codes: 2 for usage errors, 1 otherwise"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except ManifestValidationError as exc:
            ids = ", ".join(str(record["id"]) for record in exc.errors())
            raise click.UsageError(f"{exc} ({ids})") from exc
        except UsageError as exc:
            raise click.UsageError(str(exc)) from exc
        except BaseStreetNavException as exc:
            raise click.ClickException(str(exc)) from exc


@click.group(cls=StreetNavGroup)
@click.version_option(__version__)
@config_options
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[Path],
    overrides: Tuple[str, ...],
    seed: Optional[int],
    verbose: int,
):
    """Navigation toolkit: annotation, conditioning and evaluation."""
    _configure_logging(verbose)
    ctx.obj = _resolve_config(None, config_path, overrides, seed)


@cli.command()
@with_config
@manifest_option
@out_option
@jobs_option
@click.pass_obj
def annotate(config: PipelineConfig, manifest, out, jobs):
    """Grid, A* path and trajectory for every manifest entry."""
    _finish(cmd_annotate(_require(manifest, "--manifest"), config, out, jobs))


@cli.command()
@with_config
@manifest_option
@out_option
@jobs_option
@click.pass_obj
def condition(config: PipelineConfig, manifest, out, jobs):
    """Plücker maps and constraint frames along annotated trajectories."""
    _finish(cmd_condition(_require(manifest, "--manifest"), config, out, jobs))


@cli.command()
@with_config
@manifest_option
@out_option
@jobs_option
@click.argument("files", nargs=-1, type=click.Path(path_type=Path))
@click.pass_obj
def flowmask(config: PipelineConfig, manifest, out, jobs, files):
    """Top-k flow magnitude masks of .flo files."""
    _finish(cmd_flowmask(config, out, manifest, files, jobs))


@cli.command(name="eval")
@with_config
@manifest_option
@out_option
@jobs_option
@click.option("--policy", default="oracle", show_default=True, help=str(POLICIES))
@click.option("--sigma", type=float, default=0.0, show_default=True)
@click.pass_obj
def eval_command(config: PipelineConfig, manifest, out, jobs, policy, sigma):
    """Closed-loop metrics of a scripted policy over stored episodes."""
    episodes = _require(manifest, "--manifest")
    if episodes.is_dir():
        episodes = episodes / EPISODE_INDEX
    report = cmd_eval(episodes, config, out, policy, sigma, jobs)
    click.echo(_format_report(report.model_dump(by_alias=True)))


@cli.command(name="swap-negatives")
@with_config
@manifest_option
@out_option
@click.pass_obj
def swap_negatives_command(config: PipelineConfig, manifest, out):
    """Instruction/observation pairs with mismatched negatives."""
    samples = cmd_swap_negatives(_require(manifest, "--manifest"), config, out)
    click.echo(f"{len(samples)} alignment samples")


@cli.command(name="make-scene")
@with_config
@out_option
@click.option("--episodes", type=int, default=20, show_default=True)
@click.pass_obj
def make_scene(config: PipelineConfig, out, episodes):
    """Bundled synthetic scenes and planning episodes."""
    if episodes < 0:
        raise UsageError(f"--episodes must be >= 0, got {episodes}")
    manifest = write_bundled_manifest(out)
    eps = synthetic_episodes(
        episodes,
        config.seed,
        config.planner.inflation_radius,
        config.evalsim.max_steps,
    )
    index = store_episodes(out / "episodes", eps)
    click.echo(f"manifest {manifest}\nepisodes {index}")


@cli.command(name="show-config")
@with_config
@click.pass_obj
def show_config(config: PipelineConfig):
    """Effective configuration as JSON."""
    click.echo(dump_config(config))


@cli.command(name="selftest")
@with_config
@click.option("--episodes", type=int, default=20, show_default=True)
@click.pass_obj
def selftest_command(config: PipelineConfig, episodes):
    """Oracle checks on the bundled synthetic data."""
    results = selftest(config.seed, episodes)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        click.echo(f"{status} {result.name}: {result.detail}")
    if not all(result.passed for result in results):
        sys.exit(EXIT_FAILURE)


def _format_report(values: dict) -> str:
    return ", ".join(f"{key}={value}" for key, value in values.items())


def main() -> None:
    cli(prog_name="streetnav")
