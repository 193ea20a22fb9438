"""
Entry point per esecuzione come modulo Python: python -m src <comando>
"""
import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
