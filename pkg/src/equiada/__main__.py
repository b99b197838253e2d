import sys

from equiada.harness.cli import main

sys.exit(main())
