"""Entry point for: python -m lowdim_feedback.runner"""

from .core import main

if __name__ == "__main__":
    main()
