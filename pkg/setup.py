import os
import setuptools


setup_py_dir = os.path.dirname(os.path.realpath(__file__))
need_files = []
datadir = "survival_benchmarks"

hh = setup_py_dir + "/" + datadir

for root, dirs, files in os.walk(hh):
  for fn in files:
    ext = os.path.splitext(fn)[1][1:]
    if ext and ext in 'yaml'.split(
    ):
      fn = root + "/" + fn
      need_files.append(fn[1 + len(hh):])


setuptools.setup(
    name="survival-benchmarks",
    version="0.1.0",
    description="Transformer survival model with an ODE hazard head, Cox baseline and censoring-aware metrics",
    packages=setuptools.find_packages(exclude=["tests"]),
    package_data={'survival_benchmarks': need_files},
    python_requires='>=3.8',
    install_requires=['scipy', 'numpy', 'pyyaml', 'torch>=1.13', 'pandas', 'lifelines', 'scikit-learn'],
    extras_require={'dev': ['pytest']},
    entry_points={'console_scripts': ['survival-benchmarks=survival_benchmarks.cli:main']},
)
