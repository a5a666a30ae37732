# lsiquant features package
