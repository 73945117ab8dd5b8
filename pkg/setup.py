from setuptools import setup
from setuptools import find_packages

setup(name='rankprune',
      version='0.1.0',
      description='Certified error control for candidate-set pruning in two-stage ranking',
      keywords = ['ranking', 'reranking', 'pruning', 'risk control', 'information retrieval'],
      long_description=open("README.md", "r", encoding='utf-8').read(),
      long_description_content_type="text/markdown",
      install_requires=['numpy', 'scipy', 'pandas', 'torch', 'PyYAML'],
      extras_require={'test': ['pytest']},
      entry_points={'console_scripts': ['rankprune=rankprune.cli:main']},
      license='MIT',
      packages=find_packages(),
      zip_safe=False)
