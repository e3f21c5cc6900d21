"""Binary PPM (P6, maxval 255) read/write."""

import numpy as np


class PPMError(ValueError):
    pass


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise PPMError(f"expected HxWx3 uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    out, i, n = [], 0, len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise PPMError("truncated header")
        out.append(data[start:i])
    return out, i + 1  # exactly one whitespace byte follows maxval


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    (magic, w, h, maxval), off = _tokens(data, 4)
    if magic != b"P6":
        raise PPMError(f"not a binary PPM: magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}")
    payload = data[off:off + w * h * 3]
    if len(payload) != w * h * 3:
        raise PPMError("truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
