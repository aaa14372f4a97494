import sys

from lite_mind.app import main

if __name__ == "__main__":
    sys.exit(main())
