"""
This package contains the command groups registered on the `aboots` CLI.
Each group module exposes a `bp` click group whose commands appear at the
top level.
"""
