"""Allows `python -m aboots`."""

from aboots import cli

cli(prog_name="aboots")
