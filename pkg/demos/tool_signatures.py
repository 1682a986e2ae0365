"""
One signature per interception tool
===================================

Each simulator mode is run through the same battery: repeated fingerprints,
a connect to a port the real server keeps closed, two unrelated SNI names,
and a short timing session. Each tool trips a different set of indicators.
"""

from hsprobe.lab import run_indicator_matrix, start_testbed

for mode in (None, "ettercap", "webmitm", "cain"):
    with start_testbed(mode) as bed:
        run = run_indicator_matrix(bed)
    fired = sorted(k.value for k in run.report.fired_kinds)
    print(f"{mode or 'direct':9s} {run.report.verdict:20s} {', '.join(fired) or '-'}")
