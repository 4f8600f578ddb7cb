import json
import os
import tempfile
from dataclasses import field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from dataclasses_json import config

"""
Approach:

-> Report types are dataclasses decorated with dataclass_json; numpy arrays
   are declared with ndarray_field() so they serialize as nested lists and come
   back as read-only float arrays.
-> Every file the CLI produces goes through write_atomic(): content is written to a
   temporary file in the target directory and renamed over the destination, so
   a failed run never leaves a partial file behind.

Example:

    @dataclass_json
    @dataclass(frozen=True)
    class Law:
        mean: np.ndarray = ndarray_field()

    Law(np.zeros(2)).to_json()          -> '{"mean": [0.0, 0.0]}'
    Law.from_json('{"mean": [1, 2]}')   -> Law(mean=array([1., 2.]))
"""


def frozen_array(value: Any) -> np.ndarray:
    array = np.array(value, dtype=float)
    array.flags.writeable = False
    return array


def _encode(value: Optional[np.ndarray]):
    return None if value is None else np.asarray(value, dtype=float).tolist()


def _decode(value):
    return None if value is None else frozen_array(value)


def ndarray_field(**kwargs):
    return field(metadata=config(encoder=_encode, decoder=_decode), **kwargs)


def dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_atomic(path: Union[str, Path], content: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
