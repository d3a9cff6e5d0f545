"""Higher-order latent-dynamics reduced-order modelling."""
