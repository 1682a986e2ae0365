"""
Distant servers that all look close
===================================

Three servers at 20, 90 and 250 ms round trip. Probed directly, their RTTs
spread out; behind one proxy they all collapse onto the proxy's distance.
"""

import numpy as np

from hsprobe import analysis
from hsprobe.lab import genuine_chain
from hsprobe.netem import EmulatedNetwork
from hsprobe.prober import SamplingSchedule, TargetSpec, run_session
from hsprobe.responder import ResponderConfig, run_responder
from hsprobe.sim import SimConfig, SimMode, run_sim

round_trips = [20, 90, 250]
schedule = SamplingSchedule(5, 0.0, 5)
servers = [run_responder(ResponderConfig(genuine_chain())) for _ in round_trips]
net = EmulatedNetwork({s.address: rt / 2 for s, rt in zip(servers, round_trips)})


def rtt_means(addresses):
    out = []
    for addr in addresses:
        rtt, _ = run_session(TargetSpec(*addr), schedule, network=net)
        out.append(rtt.mean_ms)
    return np.array(out)


direct = rtt_means([s.address for s in servers])

# %%
sim = run_sim(SimConfig(SimMode.ETTERCAP, upstream_addr=servers[0].address,
                        extra_upstreams=tuple(s.address for s in servers[1:])))
for s in servers:
    net.set_path(sim.address_for(s.address), sim.client_path(s.address, 1.0))
proxied = rtt_means([sim.address_for(s.address) for s in servers])
sim.stop()
for s in servers:
    s.stop()

for name, means in (("direct", direct), ("proxied", proxied)):
    cv = analysis.coefficient_of_variation(means)
    print(f"{name:8s} rtt means {np.round(means, 1)}  cv {cv:.3f}  collapse={cv < 0.25}")
