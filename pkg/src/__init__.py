# lsiquant source package
