"""Test-only fault injection.

``kvmerge verify`` must fail when a formula is broken; these switches let the
test suite (and the hidden ``--inject-fault`` CLI flag) break one formula at a
time without patching source.
"""

from __future__ import annotations

from contextlib import contextmanager

KNOWN = {
    "c12_sign": "flip the sign of the coupling sensitivity vector c12",
    "hessian_diag": "use alpha(1-alpha) instead of alpha(1-2alpha) in diagonal Hessian blocks",
    "gradient_scale": "scale key gradients by 1/d_k instead of 1/sqrt(d_k)",
}

_active: set[str] = set()


def active(name: str) -> bool:
    return name in _active


@contextmanager
def inject(*names: str):
    unknown = set(names) - KNOWN.keys()
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    added = set(names) - _active
    _active.update(added)
    try:
        yield
    finally:
        _active.difference_update(added)
