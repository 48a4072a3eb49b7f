"""Learning-based price setting for an energy community.

Prosumer responses are modelled as weighted sums of linear-programming
"signatures"; a community manager learns the weights by Thompson sampling
and sets per-prosumer hourly prices by solving a bilevel problem reformulated
as a single MILP.
"""

__version__ = "0.1.0"
