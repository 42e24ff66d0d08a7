import sys

from adi.cli import main

sys.exit(main())
