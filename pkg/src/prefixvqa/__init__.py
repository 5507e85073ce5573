"""Visual-prefix question answering on a from-scratch causal LM with PEFT adapters."""

__version__ = "0.1.0"
