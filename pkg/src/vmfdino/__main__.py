import sys

from vmfdino.cli import main

sys.exit(main())
