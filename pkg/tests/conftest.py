import math

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


def sin_oracle(x, alpha):
    """Scalar reference for the node perturbation."""
    return x + alpha * math.sin(x)
