import sys

from samil.cli import main

sys.exit(main())
