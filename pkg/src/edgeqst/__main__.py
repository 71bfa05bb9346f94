import sys

from edgeqst.cli import main

sys.exit(main())
