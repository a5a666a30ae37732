# lsiquant core package
