"""metaCSR: cold-start sequential recommendation at desk scale.

Components: a bipartite interaction graph with stacked convolution
(diffusion) embeddings, a masked bidirectional self-attention sequence
encoder, pairwise ranking training, and an episodic meta-learner that
adapts the sequence parameters to new users from a handful of behaviors.
"""

__version__ = "0.1.0"
