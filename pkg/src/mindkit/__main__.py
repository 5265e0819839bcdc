import sys

from mindkit.cli import main

sys.exit(main())
