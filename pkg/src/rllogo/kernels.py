"""Hot-kernel dispatch: compiled Cython core when built, numpy fallback otherwise.

The backend is chosen once at import. Set ``RLLOGO_PURE_PYTHON=1`` to force the
fallback. Both backends produce bit-identical outputs.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("RLLOGO_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def crop_resize_raw(img, box, out_side, impl=None):
    """Bilinear resample of normalized ``box`` (x1, y1, x2, y2) to ``out_side``²."""
    impl = impl or _impl
    img = np.ascontiguousarray(img, dtype=np.uint8)
    x1, y1, x2, y2 = (float(v) for v in box)
    return impl.crop_resize(img, x1, y1, x2, y2, int(out_side))


def sgd_momentum_update(param, velocity, grad, lr, momentum, weight_decay, impl=None):
    """In place: v <- m*v + g + wd*p ; p <- p - lr*v (float32 buffers, flattened views)."""
    impl = impl or _impl
    if param.dtype == np.float32 and impl is not _pykernels:
        impl.sgd_momentum_update(param.reshape(-1), velocity.reshape(-1),
                                 np.ascontiguousarray(grad, dtype=np.float32).reshape(-1),
                                 float(lr), float(momentum), float(weight_decay))
    else:
        _pykernels.sgd_momentum_update(param, velocity, grad.astype(param.dtype, copy=False),
                                       lr, momentum, weight_decay)


def iou_pairs(a, b, impl=None):
    impl = impl or _impl
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return impl.iou_pairs(a, b)
