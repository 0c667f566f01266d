"""Weakly supervised multiple-instance classification of blood-film samples.

Cells are segmented from stained fields, cropped into patches, and each
sample is classified from the bag of its patches with a max-fusion network
trained on sample-level labels only.
"""

__version__ = "0.1.0"
