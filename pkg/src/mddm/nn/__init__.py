"""Network building blocks, the multi-view discriminative model and checkpoint I/O."""
