"""Desk-scale stochastic latent actor-critic with oracle-backed verification.

Subpackages are imported lazily by their users; this module only fixes the
package version.
"""

__version__ = "0.1.0"
