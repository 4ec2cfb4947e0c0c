"""Allow `python -m volformer`."""

import sys

from .cli import main

sys.exit(main())
