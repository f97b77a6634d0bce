import sys

from ringsim.main import main

sys.exit(main())
