"""
Model file layout: magic bytes, JSON header with the config (and vocabulary), then the named
parameter tensors in declared order.
"""

import json
from typing import Any, Dict, Iterable, List, Tuple

import numpy as np

from . import Reader, add_array, add_bytes, add_string, add_uint
from ..errors import ParseError


MAGIC = b"TDSTMDL\x01"


def model_file(header:Dict[str, Any], tensors:Iterable[Tuple[str, np.ndarray]]) -> bytearray:
    data = bytearray()
    add_bytes(data, MAGIC)
    add_string(data, json.dumps(header, sort_keys=True))

    tensors = list(tensors)
    add_uint(data, len(tensors), 4)
    for name, arr in tensors:
        add_string(data, name)
        add_array(data, arr)

    return data


def parse_model_file(data, source:str=None) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    reader = Reader(data, source)

    if reader.take_bytes(len(MAGIC)) != MAGIC:
        raise ParseError("not a model file (bad magic bytes)", path=source)

    try:
        header = json.loads(reader.take_str())
    except json.JSONDecodeError as e:
        raise ParseError(f"corrupt model header: {e}", path=source) from e

    count = reader.take_uint(4)
    tensors = [(reader.take_str(), reader.take_array()) for _ in range(count)]

    if not reader.done:
        raise ParseError(f"trailing data after {count} tensors", path=source)

    return header, tensors
