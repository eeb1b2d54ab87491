"""Extract the .text section of a little-endian ELF64 relocatable object."""
import struct
import sys


def text_bytes(path):
    data = open(path, "rb").read()
    assert data[:4] == b"\x7fELF" and data[4] == 2 and data[5] == 1, "need ELF64 LE"
    shoff, = struct.unpack_from("<Q", data, 0x28)
    shentsize, shnum, shstrndx = struct.unpack_from("<HHH", data, 0x3A)

    def section(i):
        base = shoff + i * shentsize
        name, _type, _flags, _addr, off, size = struct.unpack_from("<IIQQQQ", data, base)
        return name, off, size

    _, stroff, _ = section(shstrndx)
    for i in range(shnum):
        name, off, size = section(i)
        end = data.index(b"\0", stroff + name)
        if data[stroff + name:end] == b".text":
            return data[off:off + size]
    raise SystemExit("no .text section")


if __name__ == "__main__":
    blob = text_bytes(sys.argv[1])
    for i in range(0, len(blob), 4):
        print("%08x" % struct.unpack_from("<I", blob, i))
