import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback covers this case
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "sinuscl._kernels",
                ["src/sinuscl/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
