# CycleUV Data Module
