import sys

from lengthcast.main import main

sys.exit(main())
