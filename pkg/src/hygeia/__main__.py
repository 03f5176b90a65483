import sys

from hygeia.simctl import main

sys.exit(main())
