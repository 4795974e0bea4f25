"""python -m personapp"""

import sys

from .cli import main

sys.exit(main())
