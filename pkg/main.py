#!/usr/bin/env python3
"""
MaMe/MaRe token merging toolkit - command-line entry point

Usage:
    python main.py gen --L 197 --d 768 --out tokens.mamt
    python main.py merge --input tokens.mamt --out merged.mamt --state state.json
    python main.py restore --input merged.mamt --state state.json --out restored.mamt
"""

import os
import sys
from dotenv import load_dotenv

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from cli import dispatch


if __name__ == "__main__":
    load_dotenv()
    sys.exit(dispatch(sys.argv[1:]))
