"""Cost model, Monte Carlo verifiers, sweeps and the Fisher pruning baseline."""
