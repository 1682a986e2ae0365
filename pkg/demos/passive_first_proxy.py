"""
A proxy that lets the first connection through
==============================================

The cain-style simulator relays the first connection to each server untouched
and captures its certificate. Later connections get a forged copy, and the
connect time drops from the server's distance to the proxy's.
"""

from hsprobe import analysis
from hsprobe.lab import start_testbed
from hsprobe.prober import probe_handshake

with start_testbed("cain", upstream_one_way_ms=100, cert_gen_delay_ms=150) as bed:
    samples = [probe_handshake(bed.target, network=bed.network) for _ in range(4)]

for i, s in enumerate(samples, 1):
    print(f"probe {i}: connect {s.tcp_connect_ms:6.1f} ms   hello->cert {s.hello_to_cert_ms:6.1f} ms   "
          f"leaf {s.cert.leaf_digest[:16]}")

# %%
# A pinned fingerprint catches the switch at the second probe.
change = analysis.detect_fingerprint_change([s.cert for s in samples])
print("fingerprint_change:", change.fired, "at index", change.evidence.get("index"))
