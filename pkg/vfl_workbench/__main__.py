"""Allow ``python -m vfl_workbench``."""

from .cli import main

if __name__ == "__main__":
    main()
