"""Geolocation of light and temperature loggers.

Daily positions are estimated by scoring candidate locations with two small
neural discriminators (light curve shape and temperature agreement with
nearby weather stations) and taking the argmax of their product.
"""
__version__ = "0.1.0"
