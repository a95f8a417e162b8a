"""Black-box reinforcement-learning evasion attacks on dynamic link prediction.

Modules are organised by pipeline stage:

- :mod:`dynattack.graphs`    -- edge-list ingestion, snapshots, sliding windows
- :mod:`dynattack.nn`        -- numpy layers with explicit backward passes, Adam
- :mod:`dynattack.dygcn`     -- the GCN+LSTM victim model
- :mod:`dynattack.oracle`    -- query-only handle the attacks see
- :mod:`dynattack.metrics`   -- F1 and mismatch counts over node pairs
- :mod:`dynattack.env`       -- attack environment (states, actions, rewards)
- :mod:`dynattack.sac`       -- soft actor-critic attacker
- :mod:`dynattack.baselines` -- Random-whole / Random-partial attacks
- :mod:`dynattack.gradsuite` -- finite-difference checks of every backward pass
- :mod:`dynattack.harness`   -- experiment driver, sweeps, reports
- :mod:`dynattack.cli`       -- ``dynattack`` command line
"""

__version__ = "0.1.0"
