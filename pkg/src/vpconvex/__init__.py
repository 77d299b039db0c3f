"""Vlasov-Poisson in convex domains with specular reflection."""
