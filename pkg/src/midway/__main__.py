"""Allow running midway as ``python -m midway``."""

from midway.cli import main

if __name__ == "__main__":
    main()
