"""skewsim: deterministic simulator for decentralized SGD over label-skewed partitions."""

__version__ = "0.1.0"
