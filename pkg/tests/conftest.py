def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance_slow: multi-run desk-scale training criteria (CPU-hours)")
