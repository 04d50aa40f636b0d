from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension(
            "miniio._crc32c",
            sources=["src/miniio/_crc32c.c"],
            extra_compile_args=["-O3"],
        )
    ]
)
