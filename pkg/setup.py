# Licensed under the GPL. See License.txt in the project root for license information.
#!/usr/bin/env python

from setuptools import find_namespace_packages, setup

setup(
    name="taylor-sr",
    version="0.0.0",
    description="Linear-cost Taylor expansion attention for blind image super-resolution",
    packages=find_namespace_packages("src", include=["taylorsr", "taylorsr.*"]),
    package_dir={"": "src"},
    python_requires=">=3.8",
    install_requires=(
        "numpy",
        "scipy",
        "scikit-image",
        "Pillow",
        "tqdm",
    ),
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": ["taylor-sr = taylorsr.runner:main"],
    },
)
