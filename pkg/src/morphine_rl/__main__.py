import sys

from morphine_rl.cli import main

sys.exit(main())
