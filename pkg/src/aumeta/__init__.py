"""Cross-subject facial action unit detection.

Two-stage cascade: meta-learned AU local-region representation learning
(stage 1) followed by transformer-encoder relation learning over the AU
embeddings (stage 2), with an episodic subject-as-task data pipeline, a
synthetic identity-confounded corpus generator, and a CLI driver.
"""

__version__ = "0.1.0"
