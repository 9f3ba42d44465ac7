"""seqpack: flow-matching action policy with a completion-detection head,
trained under joint/sequential and frozen/unfrozen finetuning regimes on a
simulated sequential packing task, executed by a threshold-triggered subtask
sequencer, and evaluated with entropy and Kolmogorov-Smirnov statistics."""

__version__ = "0.1.0"
