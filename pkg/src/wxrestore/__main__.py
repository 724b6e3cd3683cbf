import sys

from wxrestore.cli import main

sys.exit(main())
