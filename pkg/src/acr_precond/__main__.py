"""Entry point for the acr-bench command."""

import sys
from typing import Optional


def main() -> Optional[int]:
    """Run the benchmark CLI."""
    from .cli import main as cli_main
    return cli_main()


if __name__ == "__main__":
    sys.exit(main() or 0)
