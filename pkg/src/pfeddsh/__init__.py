"""Progressive client onboarding simulator: hypernetwork-generated personalized
models, batch-specific parameter masks and server-side data-free replay."""

__version__ = "0.1.0"
