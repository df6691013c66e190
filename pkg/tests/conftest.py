import sys
from pathlib import Path

# make the in-tree helpers (gradcheck) importable from every test module
sys.path.insert(0, str(Path(__file__).parent))
