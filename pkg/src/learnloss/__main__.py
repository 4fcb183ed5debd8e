import sys

from learnloss.cli import main

sys.exit(main())
