from setuptools import setup, find_packages

setup(
    name="langevin_certify",
    version="0.1",
    packages=find_packages(where=".", exclude=("tests", "examples*")),
    package_dir={"": "."},
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.26.4",
        "scipy>=1.11",
        "typing-extensions>=4.12.2",
        "python-json-logger>=2.0.0",
        "dataclasses-json>=0.5.0",
    ],
    entry_points={"console_scripts": ["langevin-certify = src.main:main"]},
)
