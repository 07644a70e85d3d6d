"""genidx: a desk-scale generative retrieval laboratory.

Learns discrete document identifiers jointly with retrieval: a dense
encoder feeds a semantic indexing module (MLP / product quantization /
residual quantization), an autoregressive decoder maps queries to the
learned identifiers via beam search, and a one-to-many identifier store
serves lookups and utilization analytics.
"""

__version__ = "0.1.0"
