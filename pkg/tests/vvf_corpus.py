"""Hand-built malformed VVF files, shared by the unit and acceptance suites."""
import numpy as np

GOOD_HEADER = [
    "vvf_version = 1",
    "dims = 2 2 2",
    "spacing_mm = 1.0 1.0 1.0",
    "origin_mm = 0.0 0.0 0.0",
    "axes = 1 0 0 0 1 0 0 0 1",
    "dtype = f32le",
    "mask = absent",
]
PAYLOAD = np.arange(8, dtype="<f4").tobytes()


def _file(lines, payload=PAYLOAD, end=True) -> bytes:
    text = "\n".join(lines) + ("\nEND\n" if end else "\n")
    return text.encode("ascii") + payload


def _replace(key, line):
    return [line if h.startswith(key + " ") else h for h in GOOD_HEADER]


def malformed_corpus() -> dict[str, bytes]:
    return {
        "unknown_key": _file(GOOD_HEADER + ["color = red"]),
        "missing_key": _file([h for h in GOOD_HEADER if not h.startswith("origin_mm")]),
        "duplicate_key": _file(GOOD_HEADER + ["dims = 2 2 2"]),
        "bad_version": _file(_replace("vvf_version", "vvf_version = 2")),
        "bad_dtype": _file(_replace("dtype", "dtype = u8")),
        "truncated_payload": _file(_replace("dims", "dims = 8 8 8"),
                                   np.zeros(7 ** 3, "<f4").tobytes()),
        "no_end_line": _file(GOOD_HEADER, end=False),
        "non_numeric": _file(_replace("spacing_mm", "spacing_mm = 1.0 one 1.0")),
        "wrong_count": _file(_replace("axes", "axes = 1 0 0 0 1 0 0 0")),
        "mask_missing_bytes": _file(_replace("mask", "mask = present")),
    }


def valid_file() -> bytes:
    return _file(GOOD_HEADER)
