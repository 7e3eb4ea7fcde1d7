import sys

from fbpfusion.cli import main

sys.exit(main())
