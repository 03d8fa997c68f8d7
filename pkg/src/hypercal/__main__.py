import sys

from hypercal.cli import main

sys.exit(main())
