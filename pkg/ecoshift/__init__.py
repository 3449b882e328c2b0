"""
ecoshift - Eco-driving co-optimization for electric vehicles with multi-speed transmissions

A Python toolkit that predicts the preceding vehicle from partial connected-vehicle
data with a macroscopic traffic model and an unscented Kalman filter, plans speed,
torque, braking and gear in a receding-horizon mixed-integer program, and compares
three-speed and single-speed energy use.
"""

__version__ = "0.1.0"
__author__ = "Matt C"
