import sys

from retention_lab.cli import main

sys.exit(main())
