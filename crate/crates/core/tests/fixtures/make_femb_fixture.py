"""Writes interop.femb / interop.jsonl straight from the documented byte layout.

Run from this directory: python3 make_femb_fixture.py
"""
import json
import struct
import zlib

D_IMAGE, D_TEXT = 3, 2
SAMPLES = [
    ("img-0", 4, "complete", [0.5, -1.0, 2.0], [0.25, 3.0], False, False),
    ("img-1", 0, "image_only", [1.5, 0.0, -0.125], None, False, False),
    ("img-2", 2, "text_only", None, [-7.0, 1.0], True, False),
]

header = b"FEMB" + struct.pack("<HHIIQ", 1, 2, D_IMAGE, D_TEXT, len(SAMPLES))
header += struct.pack("<I", zlib.crc32(header))
payload = b""
for _, _, _, img, txt, _, _ in SAMPLES:
    for vec in (img, txt):
        if vec is not None:
            payload += struct.pack("<%df" % len(vec), *vec)

with open("interop.femb", "wb") as f:
    f.write(header + payload + struct.pack("<I", zlib.crc32(payload)))

with open("interop.jsonl", "w") as f:
    f.write(json.dumps({"format": "FEMB", "version": 1, "d_image": D_IMAGE, "d_text": D_TEXT, "count": len(SAMPLES)}) + "\n")
    for sid, label, avail, _, _, r_img, r_txt in SAMPLES:
        f.write(json.dumps({"id": sid, "label": label, "availability": avail,
                            "restored": {"image": r_img, "text": r_txt}}) + "\n")
