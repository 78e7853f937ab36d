"""Online visual tracker with one-shot channel selection and a
cost-sensitive online loss, plus a synthetic-sequence evaluation harness."""

__version__ = "0.1.0"
