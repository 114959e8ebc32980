"""
TerraGen - desk-scale multi-task layout-to-image diffusion
"""
__version__ = "1.0.0"
