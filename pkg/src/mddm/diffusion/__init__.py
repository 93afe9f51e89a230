"""OU-VE diffusion process, score network and reverse sampler."""
