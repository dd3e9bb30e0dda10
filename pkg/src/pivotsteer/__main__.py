import sys

from pivotsteer.cli import main

sys.exit(main())
