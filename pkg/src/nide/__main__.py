from __future__ import annotations

import sys

from nide._cli import main

sys.exit(main())
