import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        [
            Extension(
                "fewgraph.backend._ckernels",
                ["src/fewgraph/backend/_ckernels.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    ),
)
