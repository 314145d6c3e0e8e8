"""Build the bundled character corpus from the Gutenberg Shakespeare texts.

The texts ship inside the ``shakespeare`` sdist on PyPI (public domain,
Gutenberg headers already stripped). Usage::

    python scripts/make_corpus.py data/shakespeare.txt
"""
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PLAYS = [
    "lear", "hamlet", "macbeth", "othello", "romeo_and_juliet", "tempest",
    "julius_caesar", "twelfth_night", "midsummer_nights_dream",
    "merchant_of_venice", "much_ado_about_nothing", "as_you_like_it",
]
TARGET_BYTES = 1_100_000


def main(out: str) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                        "--no-binary", ":all:", "shakespeare==0.6", "-d", tmp],
                       check=True)
        sdist = next(Path(tmp).glob("shakespeare-*.tar.gz"))
        texts = []
        with tarfile.open(sdist) as tar:
            for play in PLAYS:
                member = tar.getmember(f"shakespeare-0.6/shksprdata/texts/{play}_gut.txt")
                texts.append(tar.extractfile(member).read().decode("latin-1"))
    body = "\n\n".join(t.replace("\r\n", "\n").strip() for t in texts) + "\n"
    body = body.encode("utf-8")
    if len(body) < TARGET_BYTES:
        raise SystemExit(f"corpus too small: {len(body)} bytes")
    Path(out).write_bytes(body[:TARGET_BYTES].rsplit(b"\n", 1)[0] + b"\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/shakespeare.txt")
