"""
This module is the entry point to the command-line tool.

It creates the `aboots` command collection and registers the command groups
which handle training, evaluation and corpus analysis. Failures become exit
codes here: 1 for usage and user errors, 2 for internal errors.
"""

import logging
import sys
from typing import Any

import click

from .services import settings
from .services.utils import EXIT_INTERNAL_ERROR, EXIT_USER_ERROR, AbootsError

# Import and register command groups
from .commands import corpus, evaluation, training

logger = logging.getLogger(__name__)


class AbootsCommands(click.CommandCollection):
    """Merges the command groups and maps failures to exit codes."""

    def main(self, *args: Any, **kwargs: Any) -> Any:
        kwargs["standalone_mode"] = False
        try:
            return super().main(*args, **kwargs)
        except click.ClickException as error:
            error.show()
            sys.exit(EXIT_USER_ERROR)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USER_ERROR)
        except AbootsError as error:
            if error.exit_code == EXIT_USER_ERROR:
                click.echo(f"Error: {error}", err=True)
            else:
                logger.exception(error)
            sys.exit(error.exit_code)
        except Exception as error:  # pylint: disable=broad-except
            logger.exception(error)
            sys.exit(EXIT_INTERNAL_ERROR)


@click.group(cls=AbootsCommands, sources=[training.bp, evaluation.bp, corpus.bp])
def cli():
    """Adversarial bootstrapping for multi-turn dialogue generation."""
    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
