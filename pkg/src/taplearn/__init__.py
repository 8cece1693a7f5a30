"""taplearn: an online-learning response-timing engine for speech agents.

The engine listens to a rolling 15-second audio window, predicts every
0.2 s whether the agent should start responding, and learns continuously
from user taps: a tap while waiting activates the agent and yields a
positive training sample, a tap while the agent is responding interrupts
it and yields a negative one.
"""

__version__ = "0.1.0"

from taplearn.errors import ConfigError, DataError, ValidationError

__all__ = ["ConfigError", "DataError", "ValidationError", "__version__"]
