"""
dotControl.py – Command-line factory and entry point

Initializes the DotControl command line, including:
- Run configuration loading (INI file plus section.key=value overrides)
- Logging setup
- Eigenbasis cache initialization (null, filesystem or Redis)
- Command registration
- Error handler that maps failures to exit codes
"""

import logging
import os

import click

from config import (
    BaseConfig,
    DEFAULT_CONFIG_FILE,
    EXIT_CONFIG_ERROR,
    EXIT_NUMERICAL_ERROR,
)
from services.errors import BankError, ConfigError, NumericalError
from services.run_config import dump_config, load_config
from services.state_cache import make_cache, set_cache

logger = logging.getLogger("dotControl")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigError, BankError)):
        return EXIT_CONFIG_ERROR
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL_ERROR
    return 1


class DotControlGroup(click.Group):
    """click.Group whose invocation logs uncaught errors and exits with their mapped code."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except Exception as e:
            code = exit_code_for(e)
            if code == 1:
                logger.error("Unhandled exception:", exc_info=True)
            else:
                logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(code)


def create_cli():
    """
    Command-line factory for DotControl.

    The group callback:
    - Configures logging at the requested level
    - Loads the run configuration and stores it on the context
    - Initializes the eigenbasis cache
    - Makes sure the output directory exists
    """

    @click.group(cls=DotControlGroup)
    @click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False),
                  help="INI run configuration (default: data/default.ini when present).")
    @click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                  help="Override one configuration key; may be repeated.")
    @click.option("--log-level", default=BaseConfig.LOG_LEVEL, show_default=True,
                  type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
    @click.option("--cache-type", default=BaseConfig.CACHE_TYPE, show_default=True,
                  type=click.Choice(["null", "filesystem", "redis"], case_sensitive=False),
                  help="Backend for cached eigenbases.")
    @click.pass_context
    def cli(ctx, config_path, overrides, log_level, cache_type):
        """Two-electron double-dot simulation and gate optimization."""
        logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT, force=True)

        if config_path is None and os.path.exists(DEFAULT_CONFIG_FILE):
            config_path = DEFAULT_CONFIG_FILE
        cfg = load_config(config_path, overrides)
        ctx.obj = {"config": cfg}

        set_cache(make_cache(cache_type))
        os.makedirs(cfg.output.directory, exist_ok=True)

    @click.command("show-config")
    @click.pass_context
    def show_config(ctx):
        """Print the resolved configuration as INI text."""
        click.echo(dump_config(ctx.obj["config"]))

    from commands.main import COMMANDS

    for command in COMMANDS:
        cli.add_command(command)
    cli.add_command(show_config)
    return cli


cli = create_cli()

if __name__ == "__main__":
    cli()
