import sys

from alds.cli import main

sys.exit(main())
