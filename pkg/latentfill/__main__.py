"""Main entry point for the latentfill command-line tool."""

import sys

from .commands import cli as commands_cli


def cli():
    """Entry point for the command-line interface."""
    sys.exit(commands_cli())

if __name__ == "__main__":
    cli()
