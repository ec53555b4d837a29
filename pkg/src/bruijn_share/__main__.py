"""Entry point for `python -m bruijn_share`."""

import sys

from bruijn_share.cli import main

if __name__ == "__main__":
    sys.exit(main())
