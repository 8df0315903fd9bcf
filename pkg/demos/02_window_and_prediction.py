"""
How much history does a bandwidth forecast need?
================================================

The windowed controller observes each client for ``W`` rounds before
re-selecting. A longer window gives the forecaster more data. Here we
measure one-step forecast error on a periodic, noisy throughput signal as
a function of the history length.
"""

import numpy as np

from fedsim.predictor import PredictorSpec, predict, prediction_error
from fedsim.trace import sinusoid_trace

# A sinusoid with a 20-sample period plus a little noise.
trace = sinusoid_trace("sin", np.random.default_rng([0, 99]))

# Short windows can't fit the AR model and fall back to the last value;
# longer ones pick up the oscillation.
for window in (2, 3, 5, 10, 20):
    spec = PredictorSpec("windowed-ar", order=2, fit_window=max(window, 3))
    mae = prediction_error(spec, trace, window)
    print(f"window {window:2d}: mean abs error {mae / 1e3:8.1f} KB/s")

# The simpler forecasters for comparison.
for spec in (PredictorSpec("last-value"), PredictorSpec("ewma", decay=0.5)):
    print(f"{spec.kind:>10}, window 10: {prediction_error(spec, trace, 10) / 1e3:8.1f} KB/s")

# A single forecast from an explicit history.
print("AR(2) on a ramp 1..5 predicts", round(predict(PredictorSpec("windowed-ar"), [1, 2, 3, 4, 5]), 6))
