"""Forward-backward estimation for continuously monitored quantum systems."""
