"""
Multilevel training of ODE-interpreted transformer decoders.
"""

__version__ = '0.1.0'
