"""Regenerate the bundled byte corpus from CPython's pydoc topic help.

The text ships with every CPython install (PSF license), so the corpus can be
rebuilt offline:  python scripts/make_corpus.py src/fastweights/data/corpus.txt
"""

import sys
from pathlib import Path

from pydoc_data.topics import topics


def main(out: str) -> None:
    parts = [topics[key].strip() for key in sorted(topics)]
    text = "\n\n".join(parts) + "\n"
    Path(out).write_text(text, encoding="utf-8")
    print(f"wrote {len(text.encode('utf-8'))} bytes from {len(parts)} topics to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/fastweights/data/corpus.txt")
