"""Append-only JSON record of what each CLI run did.

Every command appends one entry to ``manifest.json`` in its output
directory: the command, its arguments, the resolved config, seeds and the
artifacts it produced.  Reruns keep appending, so the file is the audit
trail for any result in that directory.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Dict, Optional

MANIFEST_NAME = "manifest.json"


def append_entry(out_dir: Path, command: str, argv: list,
                 config: Optional[dict] = None,
                 details: Optional[Dict] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    if path.exists():
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            doc = {"runs": []}
        if not isinstance(doc, dict) or "runs" not in doc:
            doc = {"runs": []}
    else:
        doc = {"runs": []}
    entry = {
        "command": command,
        "argv": list(argv),
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if config is not None:
        entry["config"] = config
    if details:
        entry.update(details)
    doc["runs"].append(entry)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)
    return path
