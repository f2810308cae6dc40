"""Joint multimodal VAEs (JMVAE, JMVAE-kl, JMVAE-h) with VAE/CVAE baselines on a numpy autodiff core."""

__version__ = "0.1.0"
