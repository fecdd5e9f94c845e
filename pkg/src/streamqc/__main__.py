"""Entry point for `python -m streamqc`."""

import sys

from streamqc.cli import main

if __name__ == "__main__":
    sys.exit(main())
