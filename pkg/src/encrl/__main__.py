import sys

from encrl.cli import main

sys.exit(main())
