"""scipipe: a decentralized scientific pipeline engine.

A coordinator service, tag-routed polling runner agents, and pluggable
executors (shell, container, batch scheduler, Kubernetes) that execute
stage-ordered pipeline definitions across heterogeneous environments.
"""

__version__ = "0.1.0"
