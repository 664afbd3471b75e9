import sys

from ctxpress.cli import main

sys.exit(main())
