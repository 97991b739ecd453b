"""Two-photon momentum-spectral correlations of type-I SPDC: model, simulated camera frames and analysis."""
