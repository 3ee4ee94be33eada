"""Counter-based random numbers (Philox4x32-10), vectorized with numpy.

Draws are keyed by ``(seed, stream, path index, block index)`` so that every
path's numbers are independent of the batch size and of the order in which
paths are generated.
"""
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

# disjoint stream tags for the different consumers of randomness
STREAM_INITIAL = 1
STREAM_INCREMENTS = 2
STREAM_EVAL = 3


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function.

    Parameters
    ----------
    counter : array_like of uint32, shape (..., 4)
    key : array_like of uint32, shape (..., 2)

    Returns
    -------
    ndarray of uint32, shape (..., 4)
    """
    ctr = np.asarray(counter, dtype=np.uint64) & _MASK
    k = np.asarray(key, dtype=np.uint64) & _MASK
    c0, c1, c2, c3 = (ctr[..., j] for j in range(4))
    k0, k1 = k[..., 0], k[..., 1]
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def _split64(value):
    value = int(value) & 0xFFFFFFFFFFFFFFFF
    return value & 0xFFFFFFFF, value >> 32


def _blocks(seed, stream, path_idx, n_blocks):
    path_idx = np.asarray(path_idx, dtype=np.uint64).reshape(-1)
    s_lo, s_hi = _split64(stream)
    k_lo, k_hi = _split64(seed)
    ctr = np.empty((path_idx.size, n_blocks, 4), dtype=np.uint64)
    ctr[..., 0] = np.arange(n_blocks, dtype=np.uint64)[None, :]
    ctr[..., 1] = path_idx[:, None]
    ctr[..., 2] = s_lo
    ctr[..., 3] = s_hi
    return philox4x32(ctr, np.array([k_lo, k_hi], dtype=np.uint64))


def _to_unit(hi, lo):
    """53-bit uniform in [0, 1) from two 32-bit words."""
    a = (hi >> np.uint32(5)).astype(np.float64)
    b = (lo >> np.uint32(6)).astype(np.float64)
    return (a * 67108864.0 + b) / 9007199254740992.0


def uniforms(seed, stream, path_idx, m):
    """Array of shape ``(len(path_idx), m)`` of uniforms on [0, 1)."""
    n_blocks = (m + 1) // 2
    raw = _blocks(seed, stream, path_idx, n_blocks)
    u = np.stack([_to_unit(raw[..., 0], raw[..., 1]), _to_unit(raw[..., 2], raw[..., 3])], axis=-1)
    return u.reshape(u.shape[0], -1)[:, :m]


def normals(seed, stream, path_idx, m):
    """Array of shape ``(len(path_idx), m)`` of standard normals (Box-Muller)."""
    n_blocks = (m + 1) // 2
    raw = _blocks(seed, stream, path_idx, n_blocks)
    u1 = 1.0 - _to_unit(raw[..., 0], raw[..., 1])  # (0, 1]
    u2 = _to_unit(raw[..., 2], raw[..., 3])
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
    return z.reshape(z.shape[0], -1)[:, :m]


def derive_stream(*parts):
    """Fold small non-negative integers into one 64-bit stream id."""
    value = 0
    for part in parts:
        value = (value * 0x100000001B3 + int(part) + 1) & 0xFFFFFFFFFFFFFFFF
    return value
