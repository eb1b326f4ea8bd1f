"""Minimal numpy/torch dispatch so the barrier and dynamics formulas can run
inside a torch autograd graph as well as on plain arrays."""

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


def is_torch(x) -> bool:
    return torch is not None and isinstance(x, torch.Tensor)


def stack(xs, axis=-1):
    if is_torch(xs[0]):
        return torch.stack(xs, dim=axis)
    return np.stack(xs, axis=axis)


def cos(x):
    return torch.cos(x) if is_torch(x) else np.cos(x)


def sin(x):
    return torch.sin(x) if is_torch(x) else np.sin(x)


def exp(x):
    return torch.exp(x) if is_torch(x) else np.exp(x)


def sqrt(x):
    return torch.sqrt(x) if is_torch(x) else np.sqrt(x)


def minimum(x, bound: float):
    if is_torch(x):
        return torch.clamp(x, max=bound)
    return np.minimum(x, bound)


def zeros_like(x):
    return torch.zeros_like(x) if is_torch(x) else np.zeros_like(x)


def ones_like(x):
    return torch.ones_like(x) if is_torch(x) else np.ones_like(x)


def matmul(a, b):
    return a @ b


def asarray_like(value, like):
    """Convert a constant numpy array into the namespace/dtype of ``like``."""
    if is_torch(like):
        return torch.as_tensor(np.asarray(value), dtype=like.dtype, device=like.device)
    return np.asarray(value, dtype=np.result_type(like, np.float64))


def einsum(spec, *ops):
    if is_torch(ops[0]):
        return torch.einsum(spec, *ops)
    return np.einsum(spec, *ops)


def concat(xs, axis=-1):
    if is_torch(xs[0]):
        return torch.cat(xs, dim=axis)
    return np.concatenate(xs, axis=axis)


def where(cond, a, b):
    if is_torch(a) or is_torch(b):
        ref = a if is_torch(a) else b
        cond = torch.as_tensor(np.asarray(cond), device=ref.device)
        return torch.where(cond, a, b)
    return np.where(cond, a, b)
