# ABOUTME: Seeded factories for systems, kernels and H-matrices used by the tests
