"""Hybrid LSTM + gradient boosted tree forecasting of intraoperative hypoxemia"""

__version__ = "0.1.0"
