"""Writes the reference NIfTI-1 header for a 4x3x2 float32 volume with
spacing (1.5, 1.5, 2.0) mm centred on the world origin, built field by field
with `struct` from the NIfTI-1 layout."""
import struct
import sys

dims = (4, 3, 2)
spacing = (1.5, 1.5, 2.0)
origin = tuple(-(n - 1) / 2 * s for n, s in zip(dims, spacing))

hdr = bytearray(352)
struct.pack_into("<i", hdr, 0, 348)           # sizeof_hdr
hdr[38] = ord("r")                             # regular
struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
struct.pack_into("<h", hdr, 70, 16)            # datatype float32
struct.pack_into("<h", hdr, 72, 32)            # bitpix
struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
struct.pack_into("<f", hdr, 108, 352.0)        # vox_offset
struct.pack_into("<f", hdr, 112, 1.0)          # scl_slope
struct.pack_into("<f", hdr, 116, 0.0)          # scl_inter
hdr[123] = 2                                   # xyzt_units: mm
hdr[148:148 + 10] = b"multirecon"              # descrip
struct.pack_into("<h", hdr, 252, 0)            # qform_code
struct.pack_into("<h", hdr, 254, 1)            # sform_code
for r in range(3):
    row = [0.0, 0.0, 0.0, origin[r]]
    row[r] = spacing[r]
    struct.pack_into("<4f", hdr, 280 + 16 * r, *row)
hdr[344:348] = b"n+1\0"

with open(sys.argv[1] if len(sys.argv) > 1 else "golden_header.bin", "wb") as f:
    f.write(hdr)
