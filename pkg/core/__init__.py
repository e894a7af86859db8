# CycleUV Core Module
