"""KAM iteration on finite windows of Hamiltonian lattices, with breather construction and checks."""

__version__ = "0.1.0"
