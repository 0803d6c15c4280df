"""Deterministic npz-compatible containers: arrays plus a JSON metadata record.

``numpy.savez`` stamps archive members with the current time, so two identical
models would not produce identical files; members here carry a fixed date.
"""

import hashlib
import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_container(path, arrays, meta):
    with zipfile.ZipFile(path, 'w', zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f'{name}.npy', date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())
        info = zipfile.ZipInfo('meta.json', date_time=_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(meta, sort_keys=True))


def load_container(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read('meta.json'))
        for name in zf.namelist():
            if name.endswith('.npy'):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta


def array_hash(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    return hashlib.sha256(repr(a.shape).encode() + a.tobytes()).hexdigest()[:16]
