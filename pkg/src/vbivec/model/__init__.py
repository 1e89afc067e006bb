"""The i-vector model: sampler, GMM, statistics, posteriors and calibration."""
