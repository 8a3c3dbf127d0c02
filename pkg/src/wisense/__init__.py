"""Wireless-sensing-to-language pipeline at desk scale.

Synthetic multi-person CSI streams, contrastive signal/text alignment, a
tiny low-rank-adapted caption decoder, text metrics with independent
oracles, and a judge client with a deterministic offline mock.
"""

__version__ = "0.1.0"
