"""
Command-line launcher for ckmm.

    python app.py simulate --scenario S3 --T 50 --count 100 --seed 7 --out runs/s3
    python app.py fit --manifest runs/s3/manifest.json --g 2 --out runs/s3-fits
    python app.py evaluate --manifest runs/s3/manifest.json --fits runs/s3-fits --out runs/s3-eval
"""

import sys

from ckmm.cli import main


if __name__ == "__main__":
    sys.exit(main())
