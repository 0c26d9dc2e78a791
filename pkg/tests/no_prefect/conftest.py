"""
Conftest for tests that don't use Prefect.

This conftest intentionally does NOT set up the Prefect test harness, so the
numerical tests run without a Prefect server and catalogue tests use
catalogue_test_harness with use_prefect=False.
"""

# No fixtures needed - tests build their own grids and catalogues
