"""Allow ``python -m opflow`` as an alternative to the console script."""

from .cli import main

main()
