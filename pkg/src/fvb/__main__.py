"""Allow ``python -m fvb``."""

import sys

from .cli import main

sys.exit(main())
