"""Hot-kernel backend selection.

The package ships a compiled Cython extension for the convolution and pooling
inner loops plus a pure numpy fallback. Selection happens once at import:

  * ``FEWGRAPH_BACKEND=auto``  (default) - per-shape hybrid when the compiled
    extension is importable, else numpy
  * ``FEWGRAPH_BACKEND=ext``   - require the compiled extension everywhere
  * ``FEWGRAPH_BACKEND=numpy`` - force the fallback everywhere

Both backends implement the same five functions with identical contracts.
``benchmarks/bench_kernels.py`` compares their throughput; on the measured
shapes the extension beats the fallback on pooling and on convolutions whose
input is single-channel (the image stem), while the fallback's im2col + BLAS
path wins once the channel count grows. The hybrid routes accordingly.
"""

import os

from fewgraph.backend import numpy_kernels

_choice = os.environ.get("FEWGRAPH_BACKEND", "auto").lower()

if _choice not in ("auto", "ext", "numpy"):
    raise ValueError(f"FEWGRAPH_BACKEND must be auto, ext or numpy, got {_choice!r}")

_ext = None
if _choice in ("auto", "ext"):
    try:
        from fewgraph.backend import _ckernels as _ext
    except ImportError:
        if _choice == "ext":
            raise ImportError(
                "FEWGRAPH_BACKEND=ext but the compiled extension is not available; "
                "build it with `pip install -e .` or set FEWGRAPH_BACKEND=numpy"
            ) from None

if _choice == "numpy" or _ext is None:
    BACKEND_NAME = "numpy"
    conv3x3_forward = numpy_kernels.conv3x3_forward
    conv3x3_grad_input = numpy_kernels.conv3x3_grad_input
    conv3x3_grad_kernel = numpy_kernels.conv3x3_grad_kernel
    maxpool2_forward = numpy_kernels.maxpool2_forward
    maxpool2_backward = numpy_kernels.maxpool2_backward
elif _choice == "ext":
    BACKEND_NAME = "ext"
    conv3x3_forward = _ext.conv3x3_forward
    conv3x3_grad_input = _ext.conv3x3_grad_input
    conv3x3_grad_kernel = _ext.conv3x3_grad_kernel
    maxpool2_forward = _ext.maxpool2_forward
    maxpool2_backward = _ext.maxpool2_backward
else:
    BACKEND_NAME = "hybrid"
    # Crossover from the benchmark: only single-channel convolutions run
    # faster in the compiled loops; wide ones belong to im2col + BLAS.
    _STEM_CHANNELS = 1

    def conv3x3_forward(x, kernel):
        impl = _ext if x.shape[1] <= _STEM_CHANNELS else numpy_kernels
        return impl.conv3x3_forward(x, kernel)

    def conv3x3_grad_input(grad_out, kernel):
        impl = _ext if kernel.shape[1] <= _STEM_CHANNELS else numpy_kernels
        return impl.conv3x3_grad_input(grad_out, kernel)

    def conv3x3_grad_kernel(grad_out, x):
        impl = _ext if x.shape[1] <= _STEM_CHANNELS else numpy_kernels
        return impl.conv3x3_grad_kernel(grad_out, x)

    maxpool2_forward = _ext.maxpool2_forward
    maxpool2_backward = _ext.maxpool2_backward
