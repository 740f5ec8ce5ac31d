import matplotlib

matplotlib.use("Agg")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full desk-scale acceptance criteria (slow)")
