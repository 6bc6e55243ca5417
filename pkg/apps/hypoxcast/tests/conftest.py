import numpy as np
import pytest

from hypoxcast.config import ExperimentConfig
from hypoxcast.dataset import Channel, ChannelSchema, Cohort, SurgeryRecord, as_series
from hypoxcast.features import FeatureMatrix

# Small enough to train every model in seconds; the raised event rate keeps
# each partition supplied with positives.
SMALL_CONFIG = """
seed=3
lookbacks=5,10
lstm_lookback=10
synth.n_surgeries=24
synth.duration_range=100,130
synth.baseline_event_rate=0.02
lstm.layer_sizes=4,4
lstm.max_epochs=2
lstm.patience_epochs=1
lstm.batch_size=128
gbt.max_depth=3
gbt.max_rounds=4
gbt.patience_rounds=2
"""


def small_config(out_dir, **overrides) -> ExperimentConfig:
    values = {"output_dir": str(out_dir)}
    values.update({k: str(v) for k, v in overrides.items()})
    return ExperimentConfig.from_text(SMALL_CONFIG, values)


def make_schema(time_series=("sao2",), statics=(), target="sao2") -> ChannelSchema:
    channels = [Channel(n, "time_series") for n in time_series] + [Channel(n, "static") for n in statics]
    return ChannelSchema(tuple(channels), target)


def make_surgery(sid: str, series: dict, statics: dict | None = None) -> SurgeryRecord:
    duration = len(next(iter(series.values())))
    return SurgeryRecord(sid, statics or {}, {k: as_series(v) for k, v in series.items()}, duration)


def make_cohort(surgeries: dict[str, dict], statics: dict[str, dict] | None = None, schema=None) -> Cohort:
    statics = statics or {}
    records = [make_surgery(sid, series, statics.get(sid)) for sid, series in surgeries.items()]
    if schema is None:
        first = next(iter(surgeries.values()))
        static_names = tuple(next(iter(statics.values()))) if statics else ()
        schema = make_schema(tuple(first), static_names, target=next(iter(first)))
    return Cohort(schema, tuple(records))


def make_matrix(X, y=None, columns=None) -> FeatureMatrix:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    columns = columns or [f"f{k}" for k in range(X.shape[1])]
    n = X.shape[0]
    return FeatureMatrix(tuple(columns), X, None if y is None else np.asarray(y), np.array(["S"] * n, dtype=object), np.arange(n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    from hypoxcast.pipeline import run_ablation

    out = tmp_path_factory.mktemp("ablation")
    return run_ablation(small_config(out))
