"""Vlasov-Poisson Asymptotics Lab"""
__version__ = "1.0.0"
