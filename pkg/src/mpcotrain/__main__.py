"""Allow ``python3 -m mpcotrain`` as an alias for the console command."""

from .cli import entrypoint

entrypoint()
