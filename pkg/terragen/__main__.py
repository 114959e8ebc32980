import sys

from terragen.cli import main

sys.exit(main())
