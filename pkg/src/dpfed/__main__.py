import sys

from dpfed.cli import main

sys.exit(main())
