# Tests that use Prefect

