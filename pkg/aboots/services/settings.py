"""
This module reads the environment variables that tune the process
and stores them as constants for easy use in other modules.

Unlike run configuration (see `aboots.services.config`), these never change
the numbers a run produces; they only control logging and file discovery.
Every environment variable constant should have a docstring
describing what it is used for. When developing locally,
`load_dotenv()` will look for a `.env` file in the top-level folder
with these environment variables set.

See https://12factor.net/config
"""

import os
from typing import Optional
from dotenv import load_dotenv

load_dotenv()


def env_get(env_var: str, default: Optional[str] = None) -> str:
    """
    Returns the value of an environment variable.

    Falls back to `default` when the variable is unset or empty and
    throws a `KeyError` if there is no default either.
    """
    val = os.environ.get(env_var)
    if not val:
        if default is None:
            raise KeyError(f"Env variable '{env_var}' is not set!")
        return default
    return val


LOG_LEVEL = env_get("ABOOTS_LOG_LEVEL", "INFO").upper()
"""Level name for the root logger configured by the CLI (e.g. `DEBUG`, `INFO`)"""

LOG_FORMAT = env_get(
    "ABOOTS_LOG_FORMAT", "%(asctime)s %(levelname)s %(name)s: %(message)s"
)
"""`logging` format string used by the CLI"""

CORPUS_GLOB = env_get("ABOOTS_CORPUS_GLOB", "*.txt")
"""Pattern matched against file names inside a `--data` directory"""

CHECKPOINT_PREFIX = env_get("ABOOTS_CHECKPOINT_PREFIX", "step-")
"""Prefix of checkpoint directory names written under `<out>/checkpoints`"""
