import sys
from pathlib import Path

# commands are imported as `src.commands`, the way run.py imports them
sys.path.insert(0, str(Path(__file__).parent.absolute()))
