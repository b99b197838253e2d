"""Training orchestration, metrics, checkpoints and the command-line interface."""
