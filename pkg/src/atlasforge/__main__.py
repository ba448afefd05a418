import sys

from atlasforge.cli import main

sys.exit(main())
