"""Consumer default prediction laboratory: hybrid neural-net / boosted-tree
classifier, baselines, evaluation, interpretation and economic value tools."""

__version__ = "0.1.0"
