import sys

from pgir.cli import main


sys.exit(main())
