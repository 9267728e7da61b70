"""Hot kernels.

``_kernels`` is the compiled Cython module (built by ``setup.py``); ``_kernels_py``
is the numpy fallback with the same signatures.  ``photodepth.kernels`` picks one
at import time.
"""
