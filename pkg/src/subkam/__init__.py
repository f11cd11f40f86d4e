"""Weak KAM / Aubry-Mather toolkit for mechanical Lagrangians on
compact sub-Riemannian model spaces (flat tori and the Heisenberg
nilmanifold).

The package computes minimal actions and short-time action kernels
(tonelli), runs the Lax-Oleinik semigroup to extract critical values,
weak KAM solutions and discounted value functions (semigroup), builds
Peierls barriers, Mane potentials and Aubry sets (aubry), solves the
closed-measure linear program for Mather measures, effective
Lagrangians/Hamiltonians and the homogenization experiment (mather),
and wires everything to a CLI (cli).
"""

__version__ = "0.1.0"
