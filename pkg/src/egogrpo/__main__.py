import sys

from egogrpo.cli import main

sys.exit(main())
