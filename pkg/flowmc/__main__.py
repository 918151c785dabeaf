import sys

from flowmc.main import main

sys.exit(main())
