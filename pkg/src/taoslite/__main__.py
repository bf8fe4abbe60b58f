import sys

from taoslite.cli import main

sys.exit(main())
