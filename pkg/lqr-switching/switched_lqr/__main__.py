import sys

from switched_lqr.cli import main


sys.exit(main())
