"""Regenerate the encoder fixture file from tools/encode_fixtures.src.

Every line is assembled with clang for aarch64-linux-gnu and paired with the
resulting word. Run from the repository root:

    python3 tools/gen_encode_fixtures.py
"""
import os
import subprocess
import sys
import tempfile

sys.path.insert(0, os.path.dirname(__file__))
from elf_text import text_bytes  # noqa: E402

ARCH = ".arch armv8.5-a\n"
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SRC = os.path.join(ROOT, "tools", "encode_fixtures.src")
OUT = os.path.join(ROOT, "crates", "core", "fixtures", "encode_fixtures.txt")
BRANCH_SRC = os.path.join(ROOT, "crates", "core", "fixtures", "branches.s")
BRANCH_OUT = os.path.join(ROOT, "crates", "core", "fixtures", "branches.words")


def assemble(text):
    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "f.s")
        obj = os.path.join(tmp, "f.o")
        with open(src, "w") as f:
            f.write(ARCH + text)
        subprocess.run(["clang", "--target=aarch64-linux-gnu", "-c", src, "-o", obj], check=True)
        return text_bytes(obj)


def branch_words():
    """Translate branches.s to plain GNU syntax and assemble it."""
    out = []
    for raw in open(BRANCH_SRC):
        line = raw.strip()
        if not line or line.startswith("//") or line == ".endfn":
            continue
        if line.startswith(".fn "):
            out.append(line.split()[1] + ":")
        else:
            out.append(line)
    blob = assemble("\n".join(out) + "\n")
    with open(BRANCH_OUT, "w") as f:
        for i in range(0, len(blob), 4):
            f.write("%08x\n" % int.from_bytes(blob[i:i + 4], "little"))


def main():
    branch_words()
    lines = [l.strip() for l in open(SRC)]
    lines = [l for l in lines if l and not l.startswith("#")]
    blob = assemble("\n".join(lines) + "\n")
    if len(blob) != 4 * len(lines):
        raise SystemExit("expected one word per source line")
    with open(OUT, "w") as out:
        out.write("# <hex-word>  <assembly>\n")
        out.write("# generated by tools/gen_encode_fixtures.py (clang aarch64 assembler)\n")
        for i, asm in enumerate(lines):
            word = int.from_bytes(blob[4 * i:4 * i + 4], "little")
            out.write("%08x  %s\n" % (word, asm))
    print("wrote %d fixtures to %s" % (len(lines), OUT))


if __name__ == "__main__":
    main()
