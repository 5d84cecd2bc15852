"""maskdiff: masked-diffusion vision-language-action stack at desk scale."""

__version__ = "0.1.0"
