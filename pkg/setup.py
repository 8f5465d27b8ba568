from setuptools import setup, find_packages
import pathlib

here = pathlib.Path(__file__).parent.resolve()

# Get the long description from the README file
long_description = (here / "README.md").read_text(encoding="utf-8")

setup(
    name="pyfairattr",
    version="2026.10.0",
    description="Multi-expert attention classifier with subgroup fairness reporting",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3.11",
    ],
    keywords="fairness, attention, cam, classification, pytorch",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    include_package_data=True,
    package_data={"pyfairattr": ["py.typed"]},
    python_requires=">=3.10",
    install_requires=[
        "torch>=2.1",
        "torchvision>=0.16",
        "numpy",
        "pandas",
        "scikit-learn",
        "Pillow",
        "matplotlib",
        "python-dotenv>=1.0.0",
    ],
    entry_points={"console_scripts": ["pyfairattr=pyfairattr.cli:main"]},
)
