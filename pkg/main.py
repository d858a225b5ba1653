import sys

from ssam_lab.cli import main

if __name__ == "__main__":
    sys.exit(main())
