"""Recommendation with cooperating RL agents that track atypical interactions.

A recommender agent proposes items, a classifier agent sorts each accepted
item into the user's normal or atypical history, and a shared critic
scores both.  Everything runs on a small numpy autodiff layer.
"""

__version__ = "0.1.0"
