"""Relation networks on graph-generated scenes, with a memory-augmented
one-shot learner and the experiment harness around them."""

__version__ = "0.1.0"
