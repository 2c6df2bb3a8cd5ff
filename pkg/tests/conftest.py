from hypothesis import settings

# numba compilation on first call can exceed the default per-example deadline
settings.register_profile("default", deadline=None)
settings.load_profile("default")
