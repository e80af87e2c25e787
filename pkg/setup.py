import ast
import os
import re
from pathlib import Path

from setuptools import find_packages, setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

this_dir = os.path.dirname(os.path.abspath(__file__))


def get_package_version():
    with open(Path(this_dir) / "compat_lab" / "__init__.py", "r") as f:
        version_match = re.search(r"^__version__\s*=\s*(.*)$", f.read(), re.MULTILINE)
    public_version = ast.literal_eval(version_match.group(1))
    local_version = os.environ.get("COMPAT_LAB_LOCAL_VERSION")
    if local_version:
        return f"{public_version}+{local_version}"
    else:
        return str(public_version)


setup(
    name="compat_lab",
    version=get_package_version(),
    packages=find_packages(exclude=("build", "tests", "dist", "docs", "benchmarks", "experiments",
                                    "compat_lab.egg-info",)),
    description="Benign overfitting and early-stopping compatibility for gradient descent on linear regression",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: BSD License",
        "Operating System :: Unix",
    ],
    python_requires=">=3.8",
    install_requires=[
        "torch",
        "einops",
        "scipy",
        "pandas",
        "hydra-core>=1.2",
        "hydra-colorlog",
        "omegaconf",
        "rich",
        "pytorch-lightning",
        "torchmetrics",
        "python-dotenv",
    ],
    extras_require={"test": ["pytest"]},
)
