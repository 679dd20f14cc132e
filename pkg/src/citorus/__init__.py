"""Convex-integration building blocks for stationary Navier-Stokes on the torus."""
