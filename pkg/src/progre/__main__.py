import sys

from progre.cli import main

sys.exit(main())
