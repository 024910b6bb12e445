import sys

from gpcover.cli import main

sys.exit(main())
