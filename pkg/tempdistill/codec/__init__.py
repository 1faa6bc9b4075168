"""
Little-endian binary reading and writing. Values are either fixed-size integers or
blobs prefixed with their length.
"""

import numpy as np

from ..errors import ParseError


# width of the length prefix in front of strings and blobs
DATA_LEN_SIZE = 4
FLOAT_DTYPE = np.dtype('<f8')


class Reader:
    """Sequential reader over a byte buffer. Each take_* call consumes the value at the cursor"""

    def __init__(self, data, source:str=None):
        self._position:int = 0
        self._data = memoryview(data).toreadonly()
        self._source = source


    @property
    def position(self) -> int:
        return self._position


    @property
    def done(self) -> bool:
        return self._position >= len(self._data)


    def _advance(self, size:int) -> memoryview:
        if self._position + size > len(self._data):
            raise ParseError(f"unexpected end of data at byte {self._position} (wanted {size} more)", path=self._source)
        self._position += size
        return self._data[self._position - size:self._position]


    def take_bytes(self, size:int) -> bytes:
        return bytes(self._advance(size))


    def take_uint(self, size:int) -> int:
        """Little-endian unsigned integer of the given byte width"""
        return int.from_bytes(self._advance(size), byteorder='little', signed=False)


    def take_data(self) -> memoryview:
        """Parse a blob prefixed with its length"""
        length = self.take_uint(DATA_LEN_SIZE)
        return self._advance(length)


    def take_str(self, encoding='utf-8') -> str:
        """Length-prefixed text; undecodable bytes are a ParseError"""
        start = self._position
        try:
            return str(self.take_data(), encoding)
        except UnicodeDecodeError as e:
            raise ParseError(f"string at byte {start} is not valid {encoding}: {e.reason}", path=self._source) from e


    def take_array(self) -> np.ndarray:
        """Parse a float64 array: rank, extents, then row-major values"""
        ndim = self.take_uint(1)
        shape = tuple(self.take_uint(4) for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self._advance(count * FLOAT_DTYPE.itemsize)
        return np.frombuffer(raw, dtype=FLOAT_DTYPE).astype(np.float64).reshape(shape)


# writers append to the caller's buffer in place

def add_bytes(ba:bytearray, data:bytes):
    ba += data


def add_uint(ba:bytearray, val:int, size:int):
    ba += val.to_bytes(size, 'little', signed=False)


def add_data(ba:bytearray, data):
    add_uint(ba, len(data), DATA_LEN_SIZE)
    ba += data


def add_string(ba:bytearray, s:str, encoding='utf-8'):
    add_data(ba, s.encode(encoding))


def add_array(ba:bytearray, arr:np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=FLOAT_DTYPE)
    assert arr.ndim < 256, "Array rank does not fit the header"
    add_uint(ba, arr.ndim, 1)
    for extent in arr.shape:
        add_uint(ba, extent, 4)
    ba += arr.tobytes(order='C')
