"""
NFSep Test Package
"""
