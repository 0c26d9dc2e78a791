# Tests that don't require Prefect

