# Config package for lsiquant
