"""Regenerate the decoder fixture file from tools/decode_fixtures.src.

Each source line is assembled with clang for aarch64-linux-gnu; the word in
the output comes from the assembler and the class column is copied from the
source line. Run from the repository root:

    python3 tools/gen_fixtures.py
"""
import os
import subprocess
import sys
import tempfile

sys.path.insert(0, os.path.dirname(__file__))
from elf_text import text_bytes  # noqa: E402

ARCH = ".arch armv8.5-a+memtag+predres+lse+ssbs+pauth\n"
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SRC = os.path.join(ROOT, "tools", "decode_fixtures.src")
OUT = os.path.join(ROOT, "crates", "core", "fixtures", "decode_fixtures.txt")


def main():
    entries = []
    for raw in open(SRC):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        asm, expected = (part.strip() for part in line.split(";", 1))
        entries.append((asm, expected))

    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "f.s")
        obj = os.path.join(tmp, "f.o")
        with open(src, "w") as f:
            f.write(ARCH)
            for asm, _ in entries:
                f.write(asm + "\n")
        subprocess.run(["clang", "--target=aarch64-linux-gnu", "-c", src, "-o", obj], check=True)
        blob = text_bytes(obj)

    if len(blob) != 4 * len(entries):
        raise SystemExit("expected one word per source line")
    with open(OUT, "w") as out:
        out.write("# <hex-word> <expected-class> [operand...]  # source assembly\n")
        out.write("# generated by tools/gen_fixtures.py (clang aarch64 assembler)\n")
        for i, (asm, expected) in enumerate(entries):
            word = int.from_bytes(blob[4 * i:4 * i + 4], "little")
            out.write("%08x %s  # %s\n" % (word, expected, asm))
    print("wrote %d fixtures to %s" % (len(entries), OUT))


if __name__ == "__main__":
    main()
