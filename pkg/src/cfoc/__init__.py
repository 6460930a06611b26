"""cfoc: counterfactual generation for polynomial control systems.

Free-terminal-time minimum-energy optimal control problems are relaxed into
moment-space semidefinite programs; the solved moments yield the
counterfactual state, arrival time, and (through the dual) a polynomial
feedback law whose closed loop reproduces the steering trajectory.
"""

__version__ = "0.1.0"
