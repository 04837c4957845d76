"""Multivariate seasonal-trend LSTM forecasting on a small numpy autodiff core."""

from .data import EventCalendar, NormStats, SeriesFrame, build_windows, ingest_csv
from .evaluation import rmse, rolling_one_step, rrmse, run_ablation
from .model import DeepMstm, DeepMstmParams, ModelConfig, decompose, init_params, load_params, save_params
from .train import TrainSettings, fit, train_model, verify_gradients

__all__ = [
    "DeepMstm",
    "DeepMstmParams",
    "EventCalendar",
    "ModelConfig",
    "NormStats",
    "SeriesFrame",
    "TrainSettings",
    "build_windows",
    "decompose",
    "fit",
    "ingest_csv",
    "init_params",
    "load_params",
    "rmse",
    "rolling_one_step",
    "rrmse",
    "run_ablation",
    "save_params",
    "train_model",
    "verify_gradients",
]
