"""Physical constants shared across the package."""

SPEED_OF_LIGHT = 299_792_458.0  # m/s
MU_EARTH = 3.986004418e14  # m^3/s^2
EARTH_RADIUS_M = 6_371_000.0
