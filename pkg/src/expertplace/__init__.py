"""Expert-to-GPU placement for mixture-of-experts inference.

Stages: routing statistics (:mod:`trace`), interconnect model (:mod:`topology`),
load-balanced clustering (:mod:`cluster_opt`), communication-aware placement
(:mod:`place_opt`) and an analytical latency model (:mod:`costmodel`).
"""

__version__ = "0.1.0"
