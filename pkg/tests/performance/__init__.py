# ABOUTME: Scaling tests for setup time and memory
