import sys

from riskavi.cli import main

sys.exit(main())
