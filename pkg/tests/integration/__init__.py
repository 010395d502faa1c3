# ABOUTME: End-to-end reproductions on 15^3 and 31^3 grids
