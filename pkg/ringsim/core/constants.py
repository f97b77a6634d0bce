"""Physical constants and the quoted apparatus figures used as defaults."""

from scipy import constants as const

SPEED_OF_LIGHT = const.c
PLANCK = const.h

# Apparatus figures
ARM_LENGTH_M = 0.400
MIRROR_COUNT = 4
FINESSE = 50000.0
VACUUM_WAVELENGTH_M = 1064e-9
QUOTED_FSR_HZ = 188e6

MOD_FREQUENCY_HZ = 10e6
MOD_DEPTH_RAD = 1.0

FAST_PI_CORNERS_HZ = (30e3, 5e3, 3e3)
PZT_INTEGRATOR_HZ = 100.0
PZT_DIFFERENTIATOR_HZ = 1e3
TEC_INTEGRATOR_HZ = 15e-3
TEC_DIFFERENTIATOR_HZ = 150e-3
PZT_DAMPING_TIME_S = 0.1
TEC_DAMPING_TIME_S = 100.0

EOM_DEPTH_RAD_PER_V = 0.85e-3
INJECTION_FREQUENCIES_HZ = (217.0, 276.0)

# Working point of the noise budget
CARRIER_POWER_W = 10e-3
SIDEBAND_POWER_W = 3e-3
QUOTED_LINEWIDTH_HZ = 4e3
QUOTED_SHOT_FREQ_PSD = 10e-6
QUOTED_SHOT_BIREFRINGENCE_PSD = 1e-19

# Sensitivity result
QUOTED_FREQUENCY_SENSITIVITY_HZ = 500e-6
QUOTED_MEASUREMENT_TIME_S = 1000.0
