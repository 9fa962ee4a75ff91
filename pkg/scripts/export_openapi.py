"""Regenerate the committed machine-readable interface description.

Usage: python scripts/export_openapi.py [output-path]
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from medlog.collector import CollectorCore
from medlog.policy import DEFAULT_POLICY
from medlog.service import create_app
from medlog.store import EventStore


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "openapi.json"
    with tempfile.TemporaryDirectory() as tmp:
        store = EventStore(tmp, durability="never")
        core = CollectorCore(store, DEFAULT_POLICY)
        app = create_app(core)
        document = app.openapi()
        core.close()
    out.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
