"""oIRL: adversarial inverse reinforcement learning with options.

Learns per-option disentangled reward functions and a policy over options
from expert demonstrations, and evaluates direct policy transfer on
perturbed gridworld environments. Includes exact tabular oracles used to
verify the reward-recovery and contraction properties numerically.
"""

__version__ = "0.1.0"
