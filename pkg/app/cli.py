"""
Command-line entry point.

    python -m app.cli calibrate-norm
    python -m app.cli grid-lin --episodes 200
    python -m app.cli train --steps 200000
    python -m app.cli backtest --controller sym --controller lin --controller outputs/checkpoints/best.ckpt
    python -m app.cli sweep-noise --controller outputs/checkpoints/best.ckpt
    python -m app.cli sweep-fees --controller sym --retrain --steps 200000
    python -m app.cli simulate --controller lin --seed 7

All results land under --out (default: paths.outputs of the config).
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import pandas as pd

from app.config import load_config, settings
from app.exceptions import MarketLabError
from app.schemas import LinParams, RunConfig
from app.seeding import SeedPolicy
from app.services.backtest import run_monte_carlo, summarize, sweep_fees, sweep_noise, wealth_curve
from app.services.hawkes import stationary_intensity
from app.services.lob import mid_price_identity_check
from app.services.mm_env import (
    EVENT_COLUMNS,
    TRACE_COLUMNS,
    EnvFactory,
    calibrate_normalization,
    load_norm_stats,
)
from app.services.neural_policy import NeuralController, save_checkpoint
from app.services.reporting import RunStamp, episodes_frame, write_csv, write_json, write_summary
from app.services.sac_trainer import train as train_sac
from app.services.strategies import Controller, LinearInventoryStrategy, SymmetricStrategy, grid_search_lin

logger = logging.getLogger(__name__)

LIN_PARAMS_FILE = "lin_params.json"
DRL_PREFIX = "DRL:"


class RunContext:
    def __init__(self, config: RunConfig, out: Optional[str]):
        self.config = config
        self.seeds = SeedPolicy(config.master_seed)
        self.stamp = RunStamp(config.config_hash(), config.master_seed)
        self.out = Path(out or config.paths.outputs)
        self.factory = EnvFactory(config.env, config.hawkes)
        # an explicit --out also holds the run's calibration and checkpoints
        self._redirected = out is not None

    @property
    def norm_path(self) -> Path:
        path = Path(self.config.paths.norm_stats)
        return self.out / path.name if self._redirected else path

    @property
    def checkpoint_dir(self) -> Path:
        return self.out / "checkpoints" if self._redirected else Path(self.config.paths.checkpoints)

    def norm(self):
        return load_norm_stats(self.norm_path)

    def lin_params(self, theta0: Optional[float], theta1: Optional[float]) -> LinParams:
        if theta0 is not None or theta1 is not None:
            return LinParams(theta0=theta0 or 0.0, theta1=theta1 or 0.0)
        path = self.out / LIN_PARAMS_FILE
        if not path.exists():
            raise click.UsageError(f"no LIN parameters: pass --theta0/--theta1 or run grid-lin first ({path})")
        payload = json.loads(path.read_text())
        return LinParams(theta0=payload["theta0"], theta1=payload["theta1"])

    def controller(self, spec: str, theta0=None, theta1=None) -> Dict[str, object]:
        """(display name, controller, env factory) for sym | lin | checkpoint path."""
        limit = self.config.env.inventory_limit
        if spec == "sym":
            return {"name": "SYM", "controller": SymmetricStrategy(), "factory": self.factory}
        if spec == "lin":
            lin = LinearInventoryStrategy(self.lin_params(theta0, theta1), limit)
            return {"name": "LIN", "controller": lin, "factory": self.factory}
        path = Path(spec)
        if not path.exists():
            raise click.BadParameter(f"expected sym, lin or a checkpoint path, got {spec!r}", param_hint="--controller")
        norm = self.norm()
        neural = NeuralController.from_checkpoint(path, norm, self.config.env.max_offset_ticks)
        return {"name": f"{DRL_PREFIX}{path.stem}", "controller": neural, "factory": self.factory.with_norm(norm)}

    def lineup(self, specs: Sequence[str], theta0=None, theta1=None) -> List[Dict[str, object]]:
        entries = [self.controller(spec, theta0, theta1) for spec in specs]
        names = [entry["name"] for entry in entries]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise click.BadParameter(f"controller names must be unique, got {', '.join(duplicates)} twice",
                                     param_hint="--controller")
        return entries


def file_label(name: str) -> str:
    """SYM -> sym, DRL:best -> drl_best."""
    return name.lower().replace(":", "_")


def reports_errors(fn):
    """Turn package errors into a one-line diagnostic and exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MarketLabError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _context(ctx: click.Context, out: Optional[str]) -> RunContext:
    config = load_config(ctx.obj.get("config_path") or settings.config_path)
    seed = ctx.obj.get("seed")
    if seed is not None:
        config = config.model_copy(update={"master_seed": seed})
    return RunContext(config, out)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="YAML run configuration (default: MM_SIM_CONFIG_PATH).")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None, help="Override master_seed.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
episodes_option = click.option("--episodes", type=click.IntRange(min=2), default=None, help="Monte Carlo episodes.")
steps_option = click.option("--steps", type=click.IntRange(min=0), default=None, help="Environment steps.")
theta_options = [
    click.option("--theta0", type=click.FloatRange(min=0), default=None, help="LIN base offset (ticks)."),
    click.option("--theta1", type=click.FloatRange(min=0), default=None, help="LIN inventory skew (ticks/unit)."),
]


def with_theta(fn):
    for option in reversed(theta_options):
        fn = option(fn)
    return fn


def common(fn):
    """--config / --seed accepted on every subcommand as well as on the group."""
    fn = seed_option(fn)
    fn = config_option(fn)
    return fn


def _prepare(ctx: click.Context, config_path: Optional[str], seed: Optional[int]) -> None:
    if config_path is not None:
        ctx.obj["config_path"] = config_path
    if seed is not None:
        ctx.obj["seed"] = seed


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML run configuration (default: MM_SIM_CONFIG_PATH).")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override master_seed.")
@click.pass_context
@reports_errors
def cli(ctx: click.Context, config_path: Optional[str], seed: Optional[int]):
    """Hawkes-driven market-making lab."""
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed


@cli.command("calibrate-norm")
@common
@steps_option
@out_option
@click.pass_context
@reports_errors
def calibrate_norm(ctx, config_path, seed, steps, out):
    """Estimate spread/trend normalization under a random controller."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    n_steps = steps or run.config.backtest.calibration_steps
    path = run.norm_path
    stats = calibrate_normalization(
        run.factory, run.seeds.seed("calibration"), n_steps, path,
        config_hash=run.stamp.config_hash, master_seed=run.stamp.master_seed,
    )
    click.echo(f"wrote {path}: spread {stats.mean_spread:.4f}+/-{stats.std_spread:.4f}, "
               f"trend {stats.mean_trend:.4f}+/-{stats.std_trend:.4f}")


@cli.command()
@common
@steps_option
@out_option
@click.pass_context
@reports_errors
def train(ctx, config_path, seed, steps, out):
    """Train the SAC policy; writes final/best checkpoints and the training curve."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    sac = run.config.sac
    if steps is not None:
        sac = sac.model_copy(update={"total_steps": steps})
    checkpoints = run.checkpoint_dir
    result = train_sac(
        run.factory, sac, run.norm(), run.seeds.seed("training"),
        checkpoint_dir=checkpoints, eval_seed_base=run.seeds.seed_base("validation"), stamp=run.stamp,
    )
    write_csv(result.curve, run.out / "training_curve.csv", run.stamp)
    click.echo(f"trained {sac.total_steps} steps; checkpoints in {checkpoints}")


@cli.command()
@common
@click.option("--controller", "controllers", multiple=True, default=("sym",), show_default=True,
              help="sym, lin or a checkpoint path; repeat to compare.")
@episodes_option
@out_option
@with_theta
@click.pass_context
@reports_errors
def backtest(ctx, config_path, seed, controllers, episodes, out, theta0, theta1):
    """Monte Carlo backtest: per-episode CSV, wealth curve and summary table."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    n = episodes or run.config.backtest.n_episodes
    seed_base = run.seeds.seed_base("evaluation")
    summaries = {}
    for entry in run.lineup(controllers, theta0, theta1):
        records = run_monte_carlo(entry["factory"], entry["controller"], n, seed_base, keep_paths=True)
        name = entry["name"]
        write_csv(episodes_frame(records), run.out / f"episodes_{file_label(name)}.csv", run.stamp)
        write_csv(wealth_curve(records), run.out / f"wealth_curve_{file_label(name)}.csv", run.stamp)
        summaries[name] = summarize(records)
    text_path, _ = write_summary(summaries, run.out, run.stamp)
    click.echo(text_path.read_text())


@cli.command("grid-lin")
@common
@episodes_option
@out_option
@click.pass_context
@reports_errors
def grid_lin(ctx, config_path, seed, episodes, out):
    """Select the LIN member with the best validation metric."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    grid = run.config.lin_grid
    best, report = grid_search_lin(
        run.factory, grid.candidates(), episodes or grid.n_episodes,
        run.seeds.seed_base("validation"), grid.metric,
    )
    write_csv(report, run.out / "lin_grid.csv", run.stamp)
    write_json(best.model_dump(), run.out / LIN_PARAMS_FILE, run.stamp)
    click.echo(f"LIN: theta0={best.theta0:g} theta1={best.theta1:g}")


@cli.command("sweep-noise")
@common
@click.option("--controller", default="sym", show_default=True, help="sym, lin or a checkpoint path.")
@episodes_option
@out_option
@with_theta
@click.pass_context
@reports_errors
def sweep_noise_cmd(ctx, config_path, seed, controller, episodes, out, theta0, theta1):
    """Fixed controller under Gaussian noise on the baseline intensities."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    entry = run.controller(controller, theta0, theta1)
    table, _ = sweep_noise(
        entry["factory"], entry["controller"], run.config.backtest.noise_variances,
        episodes or run.config.backtest.n_episodes, run.seeds.seed_base("evaluation"),
        noise_seed=run.seeds.seed("noise"),
    )
    table.insert(0, "controller", entry["name"])
    write_csv(table, run.out / "noise_sweep.csv", run.stamp)
    click.echo(table.to_string(index=False))


@cli.command("sweep-fees")
@common
@click.option("--controller", "controllers", multiple=True, default=("sym", "lin"), show_default=True,
              help="sym, lin or a checkpoint path; repeat to compare.")
@click.option("--retrain/--no-retrain", default=False, help="Retrain a SAC policy at every fee level.")
@steps_option
@episodes_option
@out_option
@with_theta
@click.pass_context
@reports_errors
def sweep_fees_cmd(ctx, config_path, seed, controllers, retrain, steps, episodes, out, theta0, theta1):
    """Controllers under each maker fee (optionally retraining the neural policy)."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    lineup: Dict[str, Controller] = {}
    factory = run.factory
    retrained_name = "DRL"
    for entry in run.lineup(controllers, theta0, theta1):
        lineup[entry["name"]] = entry["controller"]
        if entry["name"].startswith(DRL_PREFIX):
            factory = entry["factory"]
            retrained_name = entry["name"]

    retrainer = None
    if retrain:
        norm = run.norm()
        factory = factory.with_norm(norm)
        sac = run.config.sac
        if steps is not None:
            sac = sac.model_copy(update={"total_steps": steps})

        def retrainer(fee_factory: EnvFactory, fee: float) -> Controller:
            result = train_sac(fee_factory, sac, norm, run.seeds.seed("training"),
                               eval_seed_base=run.seeds.seed_base("validation"), stamp=run.stamp)
            save_checkpoint(run.checkpoint_dir / f"fee_{fee:g}.ckpt", result.best)
            return NeuralController(result.best.actor, run.config.env.max_offset_ticks)

    table = sweep_fees(
        factory, lineup, run.config.backtest.maker_fees,
        episodes or run.config.backtest.n_episodes, run.seeds.seed_base("evaluation"), retrain=retrainer,
        retrained_name=retrained_name,
    )
    write_csv(table, run.out / "fee_sweep.csv", run.stamp)
    click.echo(table.to_string(index=False))


@cli.command()
@common
@click.option("--controller", default="sym", show_default=True, help="sym, lin or a checkpoint path.")
@out_option
@with_theta
@click.pass_context
@reports_errors
def simulate(ctx, config_path, seed, controller, out, theta0, theta1):
    """Run one traced episode; writes the step trace and the event log."""
    _prepare(ctx, config_path, seed)
    run = _context(ctx, out)
    entry = run.controller(controller, theta0, theta1)
    factory = entry["factory"]
    env = EnvFactory(factory.env, factory.hawkes, factory.norm, record_trace=True)()
    episode_seed = run.seeds.seed("evaluation", 0)
    obs, _ = env.reset(seed=episode_seed)
    done = False
    while not done:
        obs, _, done, _, _ = env.step(entry["controller"].act(obs))
    write_csv(pd.DataFrame(env.trace, columns=TRACE_COLUMNS), run.out / "trace.csv", run.stamp)
    write_csv(pd.DataFrame(env.event_log_rows(), columns=EVENT_COLUMNS), run.out / "events.csv", run.stamp)
    if not mid_price_identity_check(env.event_log, env.book0, env.book):
        logger.error("mid-price identity violated on seed %d", episode_seed)
    summary = env.episode_summary()
    click.echo(
        f"seed {episode_seed}: PnL {summary['pnl']:.4f}, terminal inventory {summary['terminal_inventory']}, "
        f"trades {summary['n_trades']}, events {len(env.event_log)}"
    )
    expected = stationary_intensity(factory.hawkes).sum() * factory.env.horizon
    click.echo(f"stationary market events per episode: {expected:.1f}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit status: 0 on success, 1 on a run error, 2 on a usage error."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="mm-lab", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
