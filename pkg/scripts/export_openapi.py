#!/usr/bin/env python3
"""Regenerate docs/openapi.json from the service app."""

import json
import os
import sys
import tempfile

from cnerf.service import create_app


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "docs/openapi.json"
    with tempfile.TemporaryDirectory() as tmp:
        app = create_app(tmp, tmp)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w") as f:
        json.dump(app.openapi(), f, indent=2, sort_keys=True)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
