import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# no -ffast-math / FMA contraction: results must match the numpy fallback bit for bit
extensions = [
    Extension(
        "infershare.executor._kernels",
        ["src/infershare/executor/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
