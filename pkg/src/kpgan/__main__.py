import sys

from kpgan.cli import main

sys.exit(main())
