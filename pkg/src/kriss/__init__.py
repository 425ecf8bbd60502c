"""Self-supervised entity linking toolkit.

Pipeline: generate mention examples from unlabeled text with a dictionary
automaton over unambiguous entity surfaces, train contrastive mention and
reference encoders, link test mentions to entities by nearest prototype
(optionally fused with entity references and re-ranked by a cross encoder),
and evaluate with strict entity-id accuracy alongside the inflated lenient
surface metric.
"""

__version__ = "0.1.0"
