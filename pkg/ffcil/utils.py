import zlib
from inspect import getmembers
from types import FunctionType
from typing import Union

import numpy as np


StreamKey = Union[int, str]


def _spawn_key(key: StreamKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError("stream keys must be non-negative, got {}".format(key))
    return int(key)


def stream_seed(seed: int, *keys: StreamKey) -> int:
    """
    Counter-based seed splitting: the same (seed, keys) always yields the same
    64-bit child seed, and streams with different keys are independent. Adding
    a new consumer with a new key leaves every other stream untouched.
    """
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(_spawn_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def new_random_state(seed: int, *keys: StreamKey) -> np.random.RandomState:
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(_spawn_key(k) for k in keys))
    return np.random.RandomState(np.random.MT19937(ss))


def new_randint_func(seed, *keys):
    random_state = new_random_state(seed, *keys)
    def randint_func(low, high, size=None):
        """Draws from [low, high] inclusive."""
        return random_state.randint(low, high + 1, size=size)
    return randint_func


def new_permutation_func(seed, *keys):
    random_state = new_random_state(seed, *keys)
    def permutation_func(n):
        return random_state.permutation(n)
    return permutation_func


"""
Helper functions from
https://stackoverflow.com/questions/192109/is-there-a-built-in-function-to-print-all-the-current-properties-and-values-of-a
to print all attributes of a class without me explicitly coding it out.
"""


def api(obj):
    return [name for name in dir(obj) if name[0] != '_']


def attrs(obj):
    disallowed_properties = {
        name for name, value in getmembers(type(obj))
        if isinstance(value, (property, FunctionType))}
    return {
        name: getattr(obj, name) for name in api(obj)
        if name not in disallowed_properties and hasattr(obj, name)
        and not callable(getattr(obj, name))}
