"""Decentralized model improvement with label-distance embeddings.

Submodules:

* ``numerics``  MLP, Adam, regularized incomplete beta
* ``embedding`` distance embedding for label vectors (train / eval)
* ``attacks``   brute-force cap analysis and inverse-mapping attacker
* ``poi``       identities, blob store, prove / verify
* ``chain``     blocks, consensus state machine, rewards
* ``sim``       deterministic multi-peer scenarios
* ``cli``       command-line front end
"""

__version__ = "0.1.0"
