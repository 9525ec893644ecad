class ConfigError(ValueError):
    """Invalid or infeasible configuration."""
