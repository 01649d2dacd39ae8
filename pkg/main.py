import sys

from app.cli import main


if __name__ == "__main__":
    # 子命令见 `python main.py --help`
    sys.exit(main())
