import sys

from mmshap.cli import main

sys.exit(main())
