"""
Where the delay goes when a proxy forges certificates
======================================================

A genuine server 50 ms round trip away, probed directly and then through an
ettercap-style proxy that sits 1 ms from us. The handshake timings are
collected the same way in both cases.
"""

import numpy as np

from hsprobe import analysis
from hsprobe.lab import start_testbed
from hsprobe.prober import SamplingSchedule, run_session

schedule = SamplingSchedule(sample_count=8, total_duration=2.0, rtt_probe_count=5)

# %%
# Direct path: the TCP connect pays the full distance, the server answers
# the ClientHello after its own 10 ms of work.
with start_testbed(None, upstream_one_way_ms=25, responder_delay_ms=10) as bed:
    rtt, samples = run_session(bed.target, schedule, network=bed.network)
direct = analysis.compute_profile(samples, rtt, "site")

# %%
# Through the proxy: it accepts the connect at once, then fetches the real
# certificate (paying the distance) and spends 150 ms forging a copy.
with start_testbed("ettercap", upstream_one_way_ms=25, responder_delay_ms=10,
                   cert_gen_delay_ms=150) as bed:
    rtt, samples = run_session(bed.target, schedule, network=bed.network)
proxied = analysis.compute_profile(samples, rtt, "site")

for name, p in (("direct", direct), ("proxied", proxied)):
    ratio = p.cert_time_mean_ms / p.rtt_mean_ms
    print(f"{name:8s} rtt {p.rtt_mean_ms:7.2f} ms   cert {p.cert_time_mean_ms:7.2f} ms   "
          f"ratio {ratio:6.1f}   timing_shift={analysis.detect_timing_shift(p).fired}")

# %%
# The delay did not disappear, it moved: compare the totals.
totals = np.array([[direct.rtt_mean_ms, direct.cert_time_mean_ms],
                   [proxied.rtt_mean_ms, proxied.cert_time_mean_ms]])
print("rtt + cert per path (ms):", np.round(totals.sum(axis=1), 1))

# %%
# Against a baseline recorded on the clean path, the RTT fell and the
# certificate time rose.
print("baseline_shift fired:", analysis.detect_baseline_shift(proxied, direct).fired)
