"""Physics kernels: initial data, transport oracle, Poisson, particles"""
