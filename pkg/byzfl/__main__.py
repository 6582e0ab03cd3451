import sys

from byzfl.cli import main

sys.exit(main())
