"""Multi-task learning on multi-relational CQA graphs: a relational GIN
backbone with skip connections, task-specific heads for link
prediction, answer ranking and attribute classification, and two
cross-task consistency losses."""

__version__ = "0.1.0"
