from protoalign.cli import main
import sys

sys.exit(main())
