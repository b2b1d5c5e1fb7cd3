"""District-specific CT-to-PET translation with 3D conditional GANs."""

__version__ = "0.1.0"
