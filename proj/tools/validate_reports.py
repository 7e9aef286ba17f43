#!/usr/bin/env python3
"""Validate report JSON files against the shipped schemas.

usage: validate_reports.py SCHEMA_DIR REPORT...
The schema is picked from the report's "kind" field.
"""
import json
import sys
from pathlib import Path

import jsonschema


def main(argv):
    if len(argv) < 3:
        print(__doc__, file=sys.stderr)
        return 1
    schemas = {}
    for p in Path(argv[1]).glob("*.schema.json"):
        schemas[p.name.removesuffix(".schema.json")] = json.loads(p.read_text())
    bad = 0
    for path in argv[2:]:
        doc = json.loads(Path(path).read_text())
        schema = schemas.get(doc.get("kind", ""))
        if schema is None:
            print(f"{path}: no schema for kind {doc.get('kind')!r}")
            bad += 1
            continue
        try:
            jsonschema.validate(doc, schema)
            print(f"{path}: ok")
        except jsonschema.ValidationError as e:
            print(f"{path}: {e.message} at {list(e.absolute_path)}")
            bad += 1
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
