"""
Transfer times over a fluctuating link
======================================

A client's communication time is the time it takes to push a fixed number of
bytes through a throughput trace that changes every second. This walks
through the trace model and shows why a mean-bandwidth estimate can be far
off for a single round.
"""

import numpy as np

from fedsim.trace import bandwidth_at, static_version, synthetic_trace, transfer_time

# A mobile-style trace: log-normal fluctuations around 2 MB/s, cut to 5%
# during outages, which here cover roughly a third of the time. The
# realized mean is therefore well below 2 MB/s. It loops once it runs out.
rng = np.random.default_rng(7)
trace = synthetic_trace("demo", rng, mean_bw=2e6, duration_s=600, outage_rate=0.01)
print(f"mean {trace.mean_bandwidth / 1e6:.2f} MB/s over {trace.duration:.0f} s")
print("first ten seconds (MB/s):", np.round(trace.bw[:10] / 1e6, 2))

# Bandwidth is piecewise constant between samples, so lookups are exact.
print("bandwidth at t=3.5s:", bandwidth_at(trace, 3.5))

# A 5 MB update started at different moments takes very different times.
starts = np.arange(0, 600, 60.0)
dynamic = np.array([transfer_time(trace, s, 5e6) for s in starts])
flat = static_version(trace)
static = np.array([transfer_time(flat, s, 5e6) for s in starts])
for s, d, f in zip(starts, dynamic, static):
    print(f"start {s:5.0f}s  dynamic {d:7.2f}s  mean-bandwidth {f:5.2f}s")

# The spread is what a selector sees: the same client is fast in one round
# and a straggler in the next.
print(f"dynamic/static spread: {dynamic.min() / static[0]:.2f}x .. {dynamic.max() / static[0]:.2f}x")
