import numpy as np

from dstt.data import SolarWindTable, label_records
from dstt.model import DsttConfig

T0 = np.datetime64("2015-03-01T00", "h")


def table_from_arrays(features, dst, start=T0):
    features = np.asarray(features, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    times = start + np.arange(len(dst)) * np.timedelta64(1, "h")
    return SolarWindTable(times, np.column_stack((features, dst)))


def sine_labeled(m=200, w=1, seed=0):
    """Smooth Dst-like series with features that lead it."""
    rng = np.random.default_rng(seed)
    t = np.arange(m + w)
    dst = -30 + 25 * np.sin(2 * np.pi * t / 37) + 10 * np.sin(2 * np.pi * t / 11)
    feats = np.column_stack([np.roll(dst, -k) + rng.normal(0, 0.5, len(t)) for k in range(1, 8)])
    return label_records(table_from_arrays(feats, dst), w)


def tiny_config(**kw):
    base = dict(sequence_length=16, conv_filters=5, lstm_units=6, attention_width=6, attention_heads=2,
                head_size=2, dvl_units=4, dense_head_units=6, epochs=2, batch_size=2, learning_rate=1e-2)
    base.update(kw)
    return DsttConfig(**base)
