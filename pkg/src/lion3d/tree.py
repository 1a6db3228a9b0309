"""Walk nested parameter containers (dataclasses, dicts, lists) as named arrays."""
import dataclasses

import numpy as np


def iter_arrays(tree, prefix=""):
    """Yield (dotted_name, array) for every ndarray leaf, in a fixed order."""
    if isinstance(tree, np.ndarray):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            yield from iter_arrays(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, dict):
        for k in tree:
            yield from iter_arrays(tree[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            yield from iter_arrays(v, f"{prefix}.{i}" if prefix else str(i))


def named_arrays(tree) -> dict:
    return dict(iter_arrays(tree))


def zeros_like(tree):
    if isinstance(tree, np.ndarray):
        return np.zeros_like(tree)
    if dataclasses.is_dataclass(tree):
        return dataclasses.replace(tree, **{f.name: zeros_like(getattr(tree, f.name)) for f in dataclasses.fields(tree)})
    if isinstance(tree, dict):
        return {k: zeros_like(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return type(tree)(zeros_like(v) for v in tree)
    return tree


def copy_tree(tree):
    if isinstance(tree, np.ndarray):
        return tree.copy()
    if dataclasses.is_dataclass(tree):
        return dataclasses.replace(tree, **{f.name: copy_tree(getattr(tree, f.name)) for f in dataclasses.fields(tree)})
    if isinstance(tree, dict):
        return {k: copy_tree(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return type(tree)(copy_tree(v) for v in tree)
    return tree


def n_parameters(tree) -> int:
    return sum(a.size for _, a in iter_arrays(tree))
